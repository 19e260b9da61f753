//! Fixtures shared by the benchmarks.

use isggen_core::config::ModelConfig;
use isggen_core::dataio::{make_training_example, synth_shapes, synth_vocabulary, DatasetSpec, TrainingExample};
use isggen_core::trainer::Model;

/// Synthetic training examples at the given resolution.
pub fn examples(count: usize, image_size: usize, mask_size: usize) -> Vec<TrainingExample> {
    let spec = DatasetSpec { image_size, mask_size, ..DatasetSpec::default() };
    synth_shapes(count, 17, &spec)
        .expect("synthetic scenes render")
        .iter()
        .map(|(img, _)| make_training_example(img, &spec, 17).expect("synthetic scenes are valid"))
        .collect()
}

/// The default 64x64 model with its matching dataset.
pub fn default_setup(count: usize) -> (Model, Vec<TrainingExample>) {
    let model = Model::new(&ModelConfig::new(synth_vocabulary()), 0).expect("default config is valid");
    (model, examples(count, 64, 16))
}

/// The tiny 16x16 model with its matching dataset.
pub fn tiny_setup(count: usize) -> (Model, Vec<TrainingExample>) {
    let model = Model::new(&ModelConfig::tiny(synth_vocabulary()), 0).expect("tiny config is valid");
    (model, examples(count, 16, 8))
}
