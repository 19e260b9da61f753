//! Evaluation: Inception Score over object crops and step-to-step
//! perceptual consistency of rollouts.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Var};
use crate::dataio::{synth_shapes, synth_vocabulary, DatasetSpec, TrainingExample};
use crate::error::{Error, Result};
use crate::losses::{perceptual_loss, FeatureExtractor};
use crate::nn::{Adam, AdamConfig, Conv2d, Init, Linear, ParamStore};
use crate::sgraph::BBox;
use crate::tensor::Tensor;
use crate::trainer::{rollout_images, Model, RolloutMode};

pub const DEFAULT_SPLITS: usize = 10;
/// Validation accuracy a trained classifier must reach before it is used.
pub const CLASSIFIER_GATE: f64 = 0.95;

/// Inception Score of a table of class posteriors (one row per image).
/// Rows are divided into `splits` contiguous chunks; each chunk scores
/// `exp(mean KL(p(y|x) || p(y)))` against its own marginal, and the mean and
/// population standard deviation over chunks are returned.
pub fn inception_score(probs: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    if splits == 0 || probs.len() < splits {
        return Err(Error::validation(format!("{} images cannot fill {splits} splits", probs.len())));
    }
    let classes = probs[0].len();
    if probs.iter().any(|p| p.len() != classes) {
        return Err(Error::validation("probability rows differ in length"));
    }
    let n = probs.len();
    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let part = &probs[s * n / splits..(s + 1) * n / splits];
            let mut marginal = vec![0.0; classes];
            for row in part {
                for (m, p) in marginal.iter_mut().zip(row) {
                    *m += p / part.len() as f64;
                }
            }
            let kl: f64 = part
                .iter()
                .map(|row| {
                    row.iter()
                        .zip(&marginal)
                        .filter(|(p, _)| **p > 0.0)
                        .map(|(p, m)| p * (p.ln() - m.ln()))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / part.len() as f64;
            kl.exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

/// Mean perceptual distance between consecutive images, one value per
/// transition `k -> k+1`. Every rollout must have the same number (at
/// least two) of steps.
pub fn consistency(rollouts: &[Vec<Tensor>], extractor: &dyn FeatureExtractor) -> Result<Vec<f64>> {
    let steps = rollouts.first().map_or(0, Vec::len);
    if rollouts.is_empty() || steps < 2 {
        return Err(Error::validation("consistency needs rollouts with at least two steps"));
    }
    if rollouts.iter().any(|r| r.len() != steps) {
        return Err(Error::validation("rollouts differ in step count"));
    }
    let mut sums = vec![0.0; steps - 1];
    for images in rollouts {
        for (k, pair) in images.windows(2).enumerate() {
            let a = Var::constant(pair[0].clone());
            let b = Var::constant(pair[1].clone());
            sums[k] += perceptual_loss(&a, &b, extractor)?.item();
        }
    }
    Ok(sums.into_iter().map(|s| s / rollouts.len() as f64).collect())
}

/// A small convolutional classifier over `[3, c, c]` object crops in `[-1, 1]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CropClassifier {
    pub crop_size: usize,
    pub num_classes: usize,
    /// Accuracy on held-out crops measured after training.
    pub val_accuracy: f64,
    pub params: ParamStore,
}

struct Net {
    conv0: Conv2d,
    conv1: Conv2d,
    head: Linear,
}

fn net(store: &mut ParamStore, init: &mut Init, crop: usize, classes: usize) -> Net {
    Net {
        conv0: Conv2d::new(store, init, "clf.conv0", 3, 16, 3, 1, 1),
        conv1: Conv2d::new(store, init, "clf.conv1", 16, 32, 3, 1, 1),
        head: Linear::new(store, init, "clf.head", 32 * (crop / 4) * (crop / 4), classes),
    }
}

/// Training data for the classifier: labelled crops.
pub struct Crops {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

/// Crop every annotated object out of the examples' images.
pub fn object_crops(examples: &[TrainingExample], size: usize) -> Result<Crops> {
    let mut crops = Crops { images: Vec::new(), labels: Vec::new() };
    for ex in examples {
        let image = Var::constant(ex.image.clone());
        let graph = ex.final_graph();
        for node in graph.nodes() {
            let b = ex.boxes[&node.id];
            crops.images.push(image.crop_resize(b.to_array(), size).value().clone());
            crops.labels.push(node.category);
        }
    }
    Ok(crops)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTraining {
    pub crop_size: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        Self { crop_size: 16, train_images: 240, val_images: 60, epochs: 8, batch: 32, lr: 2e-3, seed: 0xc1a5 }
    }
}

impl CropClassifier {
    fn forward(&self, net: &Net, p: &crate::nn::Bound, crop: &Var) -> Var {
        let x = net.conv0.forward(p, crop).leaky_relu(0.2).avg_pool2();
        let x = net.conv1.forward(p, &x).leaky_relu(0.2).avg_pool2();
        let n = x.value().len();
        net.head.forward(p, &x.reshape(&[1, n]))
    }

    fn net(&self) -> Net {
        net(&mut ParamStore::new(), &mut Init::new(0), self.crop_size, self.num_classes)
    }

    /// Train on ground-truth crops of freshly sampled synthetic scenes and
    /// refuse to return a classifier below [`CLASSIFIER_GATE`] validation
    /// accuracy.
    pub fn train_on_synth(cfg: &ClassifierTraining) -> Result<Self> {
        let spec = DatasetSpec::default();
        let to_examples = |count, seed| -> Result<Vec<TrainingExample>> {
            synth_shapes(count, seed, &spec)?
                .iter()
                .map(|(img, _)| crate::dataio::make_training_example(img, &spec, seed))
                .collect()
        };
        let train = object_crops(&to_examples(cfg.train_images, cfg.seed)?, cfg.crop_size)?;
        let val = object_crops(&to_examples(cfg.val_images, cfg.seed ^ 0x5eed)?, cfg.crop_size)?;
        let clf = Self::fit(&train, synth_vocabulary().num_categories(), cfg)?;
        let clf = clf.with_accuracy(&val)?;
        if clf.val_accuracy < CLASSIFIER_GATE {
            return Err(Error::validation(format!(
                "classifier reached {:.3} validation accuracy, below the {CLASSIFIER_GATE} gate",
                clf.val_accuracy
            )));
        }
        Ok(clf)
    }

    /// Fit to labelled crops with Adam on shuffled mini-batches.
    pub fn fit(data: &Crops, num_classes: usize, cfg: &ClassifierTraining) -> Result<Self> {
        if cfg.crop_size % 4 != 0 || cfg.crop_size == 0 {
            return Err(Error::validation("classifier crop size must be a positive multiple of 4"));
        }
        let mut params = ParamStore::new();
        let net = net(&mut params, &mut Init::new(cfg.seed), cfg.crop_size, num_classes);
        let mut clf = Self { crop_size: cfg.crop_size, num_classes, val_accuracy: 0.0, params };
        let mut opt = Adam::new(&clf.params);
        let adam = AdamConfig { lr: cfg.lr, beta1: 0.9, ..AdamConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..data.images.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch.max(1)) {
                let p = clf.params.bind(true);
                let rows: Vec<Var> = chunk.iter().map(|&i| clf.forward(&net, &p, &Var::constant(data.images[i].clone()))).collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
                Var::concat(&rows, 0).cross_entropy(&labels).backward();
                opt.update(&adam, &mut clf.params, &p.grads());
            }
        }
        Ok(clf)
    }

    fn with_accuracy(mut self, val: &Crops) -> Result<Self> {
        let correct = val
            .images
            .iter()
            .zip(&val.labels)
            .map(|(img, &y)| {
                let p = self.probabilities(img)?;
                let best = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i);
                Ok(usize::from(best == Some(y)))
            })
            .sum::<Result<usize>>()?;
        self.val_accuracy = correct as f64 / val.images.len().max(1) as f64;
        Ok(self)
    }

    /// Class posterior of one crop.
    pub fn probabilities(&self, crop: &Tensor) -> Result<Vec<f64>> {
        crop.check_shape("classifier input", &[3, self.crop_size, self.crop_size])?;
        let p = self.params.bind(false);
        let logits = self.forward(&self.net(), &p, &Var::constant(crop.clone()));
        Ok(softmax_rows(logits.value().data(), self.num_classes))
    }

    /// Posteriors for every box of an image.
    pub fn classify_boxes(&self, image: &Tensor, boxes: &[BBox]) -> Result<Vec<Vec<f64>>> {
        let image = Var::constant(image.clone());
        boxes
            .iter()
            .map(|b| self.probabilities(image.crop_resize(b.to_array(), self.crop_size).value()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let clf: Self = serde_json::from_str(&text)?;
        let mut expected = ParamStore::new();
        net(&mut expected, &mut Init::new(0), clf.crop_size, clf.num_classes);
        expected.load_from(&clf.params)?;
        Ok(clf)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Is,
    Consistency,
}

/// Evaluation output document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: MetricKind,
    pub value: f64,
    pub stddev: f64,
    pub config_hash: String,
    pub dataset_id: String,
    pub mode: RolloutMode,
    /// Per-step scores for IS, per-transition means for consistency.
    pub breakdown: Vec<f64>,
    pub sequences: usize,
}

/// Roll out every example's sequence and score the consistency of each
/// transition. The reported value is the mean over transitions.
pub fn evaluate_consistency(model: &Model, examples: &[TrainingExample], seed: u64, mode: RolloutMode) -> Result<Vec<f64>> {
    let rollouts = examples
        .iter()
        .map(|ex| rollout_images(model, &ex.sequence, crate::seed::derive_seed(seed, ex.image_id), mode))
        .collect::<Result<Vec<_>>>()?;
    consistency(&rollouts, &model.perceptual)
}

/// Inception Score of object crops at every step: the objects present at
/// step `k` are cropped at their annotated boxes from the step-`k` image.
pub fn evaluate_inception(
    model: &Model,
    examples: &[TrainingExample],
    clf: &CropClassifier,
    seed: u64,
    mode: RolloutMode,
    splits: usize,
) -> Result<Vec<(f64, f64)>> {
    let mut per_step: Vec<Vec<Vec<f64>>> = Vec::new();
    for ex in examples {
        let images = rollout_images(model, &ex.sequence, crate::seed::derive_seed(seed, ex.image_id), mode)?;
        per_step.resize(images.len().max(per_step.len()), Vec::new());
        for (k, (img, graph)) in images.iter().zip(ex.sequence.steps()).enumerate() {
            let boxes: Vec<BBox> = graph.nodes().iter().map(|n| ex.boxes[&n.id]).collect();
            per_step[k].extend(clf.classify_boxes(img, &boxes)?);
        }
    }
    per_step.iter().map(|probs| inception_score(probs, splits)).collect()
}
