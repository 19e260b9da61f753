//! The assembled model, the single generation step shared by offline
//! rollouts and the service, and the training loop.

mod checkpoint;
mod train;

use std::collections::{BTreeMap, BTreeSet};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use train::{read_metrics, DiscReport, IterationRecord, TrainConfig, TrainOutcome, Trainer, METRICS_FILE};

use crate::adversary::Discriminators;
use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::crn::{make_context, Crn};
use crate::error::Result;
use crate::gcn::Gcn;
use crate::layoutnet::{compose, LayoutNet, ObjectLayout};
use crate::losses::PerceptualExtractor;
use crate::nn::{Bound, Init, ParamStore};
use crate::seed::{derive_seed, step_seed};
use crate::sgraph::{BBox, GraphSequence, NodeId, SceneGraph};
use crate::tensor::Tensor;

/// The networks of one model plus their parameters. Generator parameters
/// (graph network, layout heads, refinement network) and discriminator
/// parameters live in separate stores so they can be optimized separately.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub gcn: Gcn,
    pub layout: LayoutNet,
    pub crn: Crn,
    pub disc: Discriminators,
    pub gen_params: ParamStore,
    pub disc_params: ParamStore,
    pub perceptual: PerceptualExtractor,
}

impl Model {
    pub fn new(config: &ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = &config.vocabulary;
        let mut gen_params = ParamStore::new();
        let mut init = Init::new(derive_seed(init_seed, 0x6e6e));
        let gcn = Gcn::new(&mut gen_params, &mut init, &config.gcn, vocab.num_categories(), vocab.num_predicates());
        let layout = LayoutNet::new(&mut gen_params, &mut init, &config.layout, config.gcn.embed_dim);
        let crn = Crn::new(&mut gen_params, &mut init, &config.crn, config.gcn.embed_dim);
        let mut disc_params = ParamStore::new();
        let mut dinit = Init::new(derive_seed(init_seed, 0xd15c));
        let disc = Discriminators::new(&mut disc_params, &mut dinit, &config.disc, config.image_size(), vocab.num_categories());
        Ok(Self {
            config: config.clone(),
            gcn,
            layout,
            crn,
            disc,
            gen_params,
            disc_params,
            perceptual: PerceptualExtractor::new(config.perceptual_seed),
        })
    }

    pub fn image_size(&self) -> usize {
        self.config.image_size()
    }
}

/// Ground-truth geometry substituted for predicted boxes and masks when
/// composing layouts during training.
#[derive(Clone, Copy, Debug)]
pub struct Teacher<'a> {
    pub boxes: &'a BTreeMap<NodeId, BBox>,
    pub masks: &'a BTreeMap<NodeId, Tensor>,
}

/// One incremental generation.
#[derive(Clone, Debug)]
pub struct Generation {
    pub new_node_ids: BTreeSet<NodeId>,
    /// Boxes, masks and embeddings that were composed into the layout.
    pub composed: Vec<ObjectLayout>,
    /// `[D, S, S]` layout of the new objects.
    pub layout: Var,
    /// `[3, S, S]` image in `[-1, 1]`.
    pub image: Var,
    /// Predictions for every node of the graph, when requested.
    pub all_predictions: Option<Vec<ObjectLayout>>,
}

/// Embed the whole graph, drop already generated nodes, lay out and compose
/// the rest, and render with the previous image (if any) in the noise.
/// Both offline rollouts and the service go through this function. The graph
/// is processed in canonical order, so insertion order never changes the
/// result.
#[allow(clippy::too_many_arguments)]
pub fn generate_step(
    model: &Model,
    p: &Bound,
    graph: &SceneGraph,
    generated: &BTreeSet<NodeId>,
    previous: Option<&Var>,
    noise_seed: u64,
    teacher: Option<Teacher<'_>>,
    predict_all: bool,
) -> Result<Generation> {
    let embeddings = model.gcn.embed(p, &graph.canonical())?;
    let fresh = embeddings.filter_generated(generated)?;
    let mut composed = model.layout.predict_layout(p, &fresh);
    if let Some(t) = teacher {
        for o in &mut composed {
            let b = t.boxes.get(&o.node_id).ok_or_else(|| crate::Error::validation(format!("no box for node {}", o.node_id)))?;
            let m = t.masks.get(&o.node_id).ok_or_else(|| crate::Error::validation(format!("no mask for node {}", o.node_id)))?;
            o.bbox = Var::constant(Tensor::from_parts(vec![4], b.to_array().to_vec()));
            o.mask = Var::constant(m.clone());
        }
    }
    let layout = compose(&composed, model.config.gcn.embed_dim, model.image_size());
    let ctx = make_context(&model.config.crn, previous.cloned(), noise_seed)?;
    let image = model.crn.generate(p, &layout, &ctx)?;
    let all_predictions = predict_all.then(|| model.layout.predict_layout(p, &embeddings));
    Ok(Generation {
        new_node_ids: fresh.ids().iter().copied().collect(),
        composed,
        layout,
        image,
        all_predictions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutMode {
    /// Filter generated nodes and feed each image into the next step.
    Incremental,
    /// Regenerate every step from scratch: no filtering, no injection.
    Independent,
}

/// One step of a rollout.
#[derive(Clone, Debug)]
pub struct GenStep {
    pub k: usize,
    pub graph: SceneGraph,
    pub new_node_ids: BTreeSet<NodeId>,
    pub output: Generation,
}

impl GenStep {
    pub fn image(&self) -> &Var {
        &self.output.image
    }
}

/// Generate every step of a sequence. Step `k` draws its noise from
/// `step_seed(seed, k)`.
pub fn rollout(
    model: &Model,
    p: &Bound,
    seq: &GraphSequence,
    seed: u64,
    mode: RolloutMode,
    teacher: Option<Teacher<'_>>,
) -> Result<Vec<GenStep>> {
    let mut steps: Vec<GenStep> = Vec::with_capacity(seq.len());
    let mut generated = BTreeSet::new();
    let none = BTreeSet::new();
    for (k, graph) in seq.steps().iter().enumerate() {
        let (filter, previous) = match mode {
            RolloutMode::Incremental => (&generated, steps.last().map(|s| s.image())),
            RolloutMode::Independent => (&none, None),
        };
        let output = generate_step(model, p, graph, filter, previous, step_seed(seed, k), teacher, teacher.is_some())?;
        let new_node_ids = graph.node_ids().difference(&generated).copied().collect();
        generated.extend(graph.node_ids());
        steps.push(GenStep { k, graph: graph.clone(), new_node_ids, output });
    }
    Ok(steps)
}

/// Images of an inference rollout with frozen weights.
pub fn rollout_images(model: &Model, seq: &GraphSequence, seed: u64, mode: RolloutMode) -> Result<Vec<Tensor>> {
    let p = model.gen_params.bind(false);
    Ok(rollout(model, &p, seq, seed, mode, None)?
        .into_iter()
        .map(|s| s.output.image.value().clone())
        .collect())
}
