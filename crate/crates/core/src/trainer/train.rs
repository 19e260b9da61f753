use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::{rollout, GenStep, Model, RolloutMode, Teacher};
use crate::adversary::{gan_loss, stack_scores, Side};
use crate::autograd::Var;
use crate::dataio::TrainingExample;
use crate::error::{Error, Result};
use crate::losses::{total_generator_loss, LossReport, LossTargets, LossWeights, StepOutput};
use crate::nn::{Adam, AdamConfig, Bound};
use crate::seed::derive_seed;
use crate::sgraph::{BBox, NodeId};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total number of iterations, counting any already completed before a resume.
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    /// Save a checkpoint every this many iterations; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Compose layouts from ground-truth boxes and masks instead of predictions.
    pub teacher_forcing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            iterations: 1000,
            batch_size: 8,
            seed: 0,
            gen_lr: adam.lr,
            disc_lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            weights: LossWeights::default(),
            checkpoint_every: 0,
            teacher_forcing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        for (name, v) in [("gen_lr", self.gen_lr), ("disc_lr", self.disc_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(format!("{name} must be positive and finite, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::validation(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }
}

/// Batch-mean discriminator losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscReport {
    pub image: f64,
    pub object: f64,
    pub aux: f64,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: u64,
    pub losses: LossReport,
    pub disc: DiscReport,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<IterationRecord>,
    pub last_checkpoint: Option<PathBuf>,
}

/// A model, its optimizers and the iteration counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    /// Number of completed iterations.
    pub iteration: u64,
}

struct ObjectsAt {
    boxes: Vec<BBox>,
    categories: Vec<usize>,
}

fn objects_at(step: &GenStep, boxes: &BTreeMap<NodeId, BBox>) -> Result<ObjectsAt> {
    let mut out = ObjectsAt { boxes: Vec::new(), categories: Vec::new() };
    for node in step.graph.nodes() {
        let b = boxes.get(&node.id).ok_or_else(|| Error::validation(format!("no box for node {}", node.id)))?;
        out.boxes.push(*b);
        out.categories.push(node.category);
    }
    Ok(out)
}

fn mean_vars(vars: Vec<Var>) -> Var {
    let n = vars.len().max(1) as f64;
    vars.into_iter()
        .reduce(|a, b| a.add(&b))
        .map(|s| s.scale(1.0 / n))
        .unwrap_or_else(|| Var::constant(Tensor::scalar(0.0)))
}

fn grads_finite(grads: &BTreeMap<String, Tensor>) -> Option<&str> {
    grads.iter().find(|(_, g)| !g.all_finite()).map(|(k, _)| k.as_str())
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            gen_opt: Adam::new(&model.gen_params),
            disc_opt: Adam::new(&model.disc_params),
            model,
            config,
            iteration: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train_config.validate()?;
        let model = ckpt.restore_model()?;
        Ok(Self {
            model,
            config: ckpt.train_config,
            gen_opt: ckpt.gen_opt,
            disc_opt: ckpt.disc_opt,
            iteration: ckpt.iteration,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config.clone(),
            train_config: self.config.clone(),
            iteration: self.iteration,
            gen_params: self.model.gen_params.clone(),
            disc_params: self.model.disc_params.clone(),
            gen_opt: self.gen_opt.clone(),
            disc_opt: self.disc_opt.clone(),
        }
    }

    fn check_data(&self, data: &[TrainingExample]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::validation("training set is empty"));
        }
        let s = self.model.image_size();
        for ex in data {
            ex.image.check_shape("training image", &[3, s, s])?;
        }
        Ok(())
    }

    /// Indices of the examples drawn (with replacement) for iteration `iter`.
    pub fn batch_indices(&self, iter: u64, len: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, iter));
        (0..self.config.batch_size).map(|_| rng.random_range(0..len)).collect()
    }

    /// Run one discriminator update followed by one generator update.
    pub fn train_iteration(&mut self, data: &[TrainingExample]) -> Result<IterationRecord> {
        self.check_data(data)?;
        let start = Instant::now();
        let iter = self.iteration + 1;
        let batch: Vec<&TrainingExample> = self.batch_indices(iter, data.len()).into_iter().map(|i| &data[i]).collect();
        let iter_seed = derive_seed(self.config.seed, iter);

        let gp = self.model.gen_params.bind(true);
        let mut rollouts = Vec::with_capacity(batch.len());
        for (b, ex) in batch.iter().enumerate() {
            let seed = derive_seed(iter_seed, 0x1000 + b as u64);
            let steps = if self.config.teacher_forcing {
                let teacher = Teacher { boxes: &ex.boxes, masks: &ex.masks };
                rollout(&self.model, &gp, &ex.sequence, seed, RolloutMode::Incremental, Some(teacher))?
            } else {
                self.rollout_with_predictions(&gp, ex, seed)?
            };
            rollouts.push(steps);
        }

        let disc = self.disc_step(&batch, &rollouts)?;
        let losses = self.gen_step(&gp, &batch, &rollouts)?;

        self.iteration = iter;
        Ok(IterationRecord { iter, losses, disc, elapsed_ms: start.elapsed().as_millis() as u64 })
    }

    /// Without teacher forcing the composed layout uses predicted geometry,
    /// but box and mask losses still need predictions for every node.
    fn rollout_with_predictions(&self, gp: &Bound, ex: &TrainingExample, seed: u64) -> Result<Vec<GenStep>> {
        let mut steps = rollout(&self.model, gp, &ex.sequence, seed, RolloutMode::Incremental, None)?;
        for s in &mut steps {
            let emb = self.model.gcn.embed(gp, &s.graph)?;
            s.output.all_predictions = Some(self.model.layout.predict_layout(gp, &emb));
        }
        Ok(steps)
    }

    fn disc_step(&mut self, batch: &[&TrainingExample], rollouts: &[Vec<GenStep>]) -> Result<DiscReport> {
        let dp = self.model.disc_params.bind(true);
        let d = &self.model.disc;
        let mut image_terms = Vec::new();
        let mut object_terms = Vec::new();
        let mut aux_terms = Vec::new();
        for (ex, steps) in batch.iter().zip(rollouts) {
            let real = Var::constant(ex.image.clone());
            let real_score = d.d_image(&dp, &real)?.realism;
            let fake_scores: Vec<Var> = steps
                .iter()
                .map(|s| Ok(d.d_image(&dp, &s.image().detach())?.realism))
                .collect::<Result<_>>()?;
            image_terms.push(gan_loss(Some(&real_score), stack_scores(&fake_scores).as_ref(), Side::Discriminator));

            let last = steps.last().expect("sequences are non-empty");
            let all = objects_at(last, &ex.boxes)?;
            let real_obj = d.d_object(&dp, &real, &all.boxes, &all.categories)?;
            let mut fake_obj = Vec::new();
            for s in steps {
                let at = objects_at(s, &ex.boxes)?;
                if let Some(out) = d.d_object(&dp, &s.image().detach(), &at.boxes, &at.categories)? {
                    fake_obj.push(out.realism);
                }
            }
            if let Some(real_obj) = real_obj {
                object_terms.push(gan_loss(Some(&real_obj.realism), stack_scores(&fake_obj).as_ref(), Side::Discriminator));
                if let Some(logits) = &real_obj.class_logits {
                    aux_terms.push(logits.cross_entropy(&all.categories));
                }
            }
        }
        let (image, object, aux) = (mean_vars(image_terms), mean_vars(object_terms), mean_vars(aux_terms));
        let total = image.add(&object).add(&aux);
        let report = DiscReport { image: image.item(), object: object.item(), aux: aux.item() };
        if !total.item().is_finite() {
            return Err(self.non_finite(format!("discriminator loss {report:?}")));
        }
        total.backward();
        let grads = dp.grads();
        if let Some(name) = grads_finite(&grads) {
            return Err(self.non_finite(format!("gradient of `{name}`")));
        }
        let cfg = self.config.adam(self.config.disc_lr);
        self.disc_opt.update(&cfg, &mut self.model.disc_params, &grads);
        if !self.model.disc_params.all_finite() {
            return Err(self.non_finite("discriminator parameters after the update".into()));
        }
        Ok(report)
    }

    fn gen_step(&mut self, gp: &Bound, batch: &[&TrainingExample], rollouts: &[Vec<GenStep>]) -> Result<LossReport> {
        let dp = self.model.disc_params.bind(false);
        let d = &self.model.disc;
        let mut totals = Vec::new();
        let mut reports = Vec::new();
        for (ex, steps) in batch.iter().zip(rollouts) {
            let mut outputs = Vec::with_capacity(steps.len());
            for s in steps {
                let image = s.image().clone();
                let mut adversarial = gan_loss(None, Some(&d.d_image(&dp, &image)?.realism), Side::Generator);
                let at = objects_at(s, &ex.boxes)?;
                if let Some(out) = d.d_object(&dp, &image, &at.boxes, &at.categories)? {
                    adversarial = adversarial.add(&gan_loss(None, Some(&out.realism), Side::Generator));
                    if let Some(logits) = &out.class_logits {
                        adversarial = adversarial.add(&logits.cross_entropy(&at.categories));
                    }
                }
                let objects = s.output.all_predictions.clone().expect("training rollouts predict every node");
                outputs.push(StepOutput { image, objects, adversarial });
            }
            let targets = LossTargets { image: &ex.image, boxes: &ex.boxes, masks: &ex.masks };
            let (total, report) = total_generator_loss(&outputs, &targets, &self.config.weights, &self.model.perceptual)?;
            totals.push(total);
            reports.push(report);
        }
        let report = LossReport::mean(&reports);
        if !report.is_finite() {
            return Err(self.non_finite(format!("generator losses {report:?}")));
        }
        mean_vars(totals).backward();
        let grads = gp.grads();
        if let Some(name) = grads_finite(&grads) {
            return Err(self.non_finite(format!("gradient of `{name}`")));
        }
        let cfg = self.config.adam(self.config.gen_lr);
        self.gen_opt.update(&cfg, &mut self.model.gen_params, &grads);
        if !self.model.gen_params.all_finite() {
            return Err(self.non_finite("generator parameters after the update".into()));
        }
        Ok(report)
    }

    fn non_finite(&self, what: String) -> Error {
        Error::NonFinite(format!("iteration {}: {what}", self.iteration + 1))
    }

    pub fn checkpoint_path(out_dir: &Path, iteration: u64) -> PathBuf {
        out_dir.join("checkpoints").join(format!("ckpt-{iteration:06}.bin"))
    }

    /// Train until `config.iterations` is reached, appending one record per
    /// iteration to `out_dir/metrics.jsonl` and saving checkpoints under
    /// `out_dir/checkpoints/`. Records past the current iteration (left by an
    /// interrupted run) are dropped first, so a resumed run writes the same
    /// log as an uninterrupted one.
    ///
    /// A non-finite loss, gradient or parameter aborts with
    /// [`Error::NonFinite`] naming the last checkpoint that was saved.
    pub fn run(&mut self, data: &[TrainingExample], out_dir: &Path, mut on_iteration: impl FnMut(&IterationRecord)) -> Result<TrainOutcome> {
        self.check_data(data)?;
        let ckpt_dir = out_dir.join("checkpoints");
        std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        let metrics_path = out_dir.join(METRICS_FILE);
        truncate_metrics(&metrics_path, self.iteration)?;
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;

        let mut last_checkpoint = (self.iteration > 0)
            .then(|| Self::checkpoint_path(out_dir, self.iteration))
            .filter(|p| p.exists());
        let mut records = Vec::new();
        while self.iteration < self.config.iterations {
            let record = match self.train_iteration(data) {
                Ok(r) => r,
                Err(Error::NonFinite(msg)) => {
                    let last = last_checkpoint.as_ref().map_or("none saved yet".to_string(), |p| p.display().to_string());
                    return Err(Error::NonFinite(format!("{msg}; last good checkpoint: {last}")));
                }
                Err(e) => return Err(e),
            };
            let mut line = serde_json::to_vec(&record)?;
            line.push(b'\n');
            log.write_all(&line).map_err(|e| Error::io(&metrics_path, e))?;
            on_iteration(&record);
            records.push(record);
            let every = self.config.checkpoint_every;
            if self.iteration == self.config.iterations || (every > 0 && self.iteration % every == 0) {
                let path = Self::checkpoint_path(out_dir, self.iteration);
                save_checkpoint(&path, &self.checkpoint())?;
                last_checkpoint = Some(path);
            }
        }
        Ok(TrainOutcome { records, last_checkpoint })
    }
}

fn truncate_metrics(path: &Path, keep_through: u64) -> Result<()> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: IterationRecord = serde_json::from_str(&line)?;
        if record.iter <= keep_through {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Read a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<IterationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::tests::{small_data, small_model};
    use super::super::{load_checkpoint, Checkpoint};
    use super::*;

    fn config(iterations: u64) -> TrainConfig {
        TrainConfig { iterations, batch_size: 2, seed: 11, gen_lr: 1e-3, disc_lr: 1e-3, checkpoint_every: 2, ..Default::default() }
    }

    fn strip_time(mut records: Vec<IterationRecord>) -> Vec<IterationRecord> {
        for r in &mut records {
            r.elapsed_ms = 0;
        }
        records
    }

    #[test]
    fn same_seed_same_metrics_log() {
        let data = small_data(4, 2);
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let mut t = Trainer::new(small_model(), config(3)).unwrap();
            t.run(&data, dir.path(), |_| {}).unwrap();
            (strip_time(read_metrics(&dir.path().join(METRICS_FILE)).unwrap()), t.model.gen_params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert!(a.iter().all(|r| r.losses.is_finite()));
    }

    #[test]
    fn resuming_matches_an_uninterrupted_run() {
        let data = small_data(4, 3);
        let full_dir = tempfile::tempdir().unwrap();
        let mut full = Trainer::new(small_model(), config(4)).unwrap();
        full.run(&data, full_dir.path(), |_| {}).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut first = Trainer::new(small_model(), config(4)).unwrap();
        first.config.iterations = 3;
        first.run(&data, dir.path(), |_| {}).unwrap();
        // Iteration 3 was logged but the newest checkpoint is from iteration 2.
        let ckpt = load_checkpoint(&Trainer::checkpoint_path(dir.path(), 2)).unwrap();
        let mut resumed = Trainer::from_checkpoint(ckpt).unwrap();
        resumed.config.iterations = 4;
        resumed.run(&data, dir.path(), |_| {}).unwrap();

        assert_eq!(resumed.iteration, 4);
        assert_eq!(resumed.model.gen_params, full.model.gen_params);
        assert_eq!(resumed.disc_opt, full.disc_opt);
        let a = strip_time(read_metrics(&full_dir.path().join(METRICS_FILE)).unwrap());
        let b = strip_time(read_metrics(&dir.path().join(METRICS_FILE)).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoints_round_trip_byte_for_byte() {
        let data = small_data(2, 4);
        let mut t = Trainer::new(small_model(), config(1)).unwrap();
        t.train_iteration(&data).unwrap();
        let bytes = t.checkpoint().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, t.checkpoint());
        assert_eq!(back.to_bytes(), bytes);

        let mut corrupt = bytes.clone();
        *corrupt.last_mut().unwrap() ^= 1;
        assert!(Checkpoint::from_bytes(&corrupt).is_err());
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
    }

    #[test]
    fn loading_into_a_different_architecture_names_the_parameter() {
        let ckpt = Trainer::new(small_model(), config(1)).unwrap().checkpoint();
        let mut cfg = ckpt.model_config.clone();
        cfg.layout.box_hidden_dim += 1;
        let mut other = Model::new(&cfg, 0).unwrap();
        let err = ckpt.load_into(&mut other).unwrap_err().to_string();
        assert!(err.contains("layout.box.hidden"), "{err}");

        let mut cfg = ckpt.model_config.clone();
        cfg.perceptual_seed += 1;
        let mut same_shapes = Model::new(&cfg, 0).unwrap();
        let err = ckpt.load_into(&mut same_shapes).unwrap_err().to_string();
        assert!(err.contains("config hash"), "{err}");
    }

    #[test]
    fn divergence_aborts_and_points_at_the_last_checkpoint() {
        let data = small_data(2, 5);
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(small_model(), config(1)).unwrap();
        t.config.checkpoint_every = 1;
        t.run(&data, dir.path(), |_| {}).unwrap();
        t.config.gen_lr = 1e308;
        t.config.iterations = 6;
        let err = t.run(&data, dir.path(), |_| {}).unwrap_err();
        let Error::NonFinite(msg) = &err else { panic!("expected a non-finite error, got {err}") };
        let path = msg.split("last good checkpoint: ").nth(1).expect("message names a checkpoint");
        let ckpt = load_checkpoint(Path::new(path)).unwrap();
        assert!(ckpt.gen_params.all_finite());
        assert!(t.iteration < 6);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { gen_lr: f64::NAN, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
        let t: TrainConfig = serde_json::from_str(r#"{"iterations": 5}"#).unwrap();
        assert_eq!(t.batch_size, 8);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"iteratons": 5}"#).is_err());
    }
}
