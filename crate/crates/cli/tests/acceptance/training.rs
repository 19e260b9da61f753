//! Training-based criteria: loss decrease, the incremental-versus-independent
//! direction check and the perceptual-loss ablation.

use std::path::Path;
use std::time::{Duration, Instant};

use isggen_core::config::ModelConfig;
use isggen_core::dataio::{load_dataset, Dataset};
use isggen_core::metrics::evaluate_consistency;
use isggen_core::trainer::{Model, RolloutMode, TrainConfig, Trainer};

use crate::common::{run_ok, s};

pub const SEEDS: [u64; 3] = [0, 1, 2];
pub const SMOKE_ITERATIONS: u64 = 200;
pub const DIRECTION_ITERATIONS: u64 = 2000;
const SMOKE_BUDGET: Duration = Duration::from_secs(15 * 60);
const DIRECTION_BUDGET: Duration = Duration::from_secs(2 * 60 * 60);
/// Seed of the rollout noise used for every consistency evaluation.
const EVAL_SEED: u64 = 99;

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn load(dir: &Path) -> Dataset {
    load_dataset(dir).unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
}

/// Train one model in-process, returning it with the generator losses of
/// the first and last iterations.
fn train(data: &Dataset, seed: u64, config: TrainConfig) -> Result<(Model, f64, f64), String> {
    let model = Model::new(&ModelConfig::new(data.manifest.vocabulary.clone()), seed).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(model, TrainConfig { seed, ..config }).map_err(|e| e.to_string())?;
    let mut first = None;
    let mut last = f64::NAN;
    while trainer.iteration < trainer.config.iterations {
        let r = trainer.train_iteration(&data.examples).map_err(|e| format!("seed {seed}: {e}"))?;
        if !r.losses.is_finite() {
            return Err(format!("seed {seed}: non-finite losses at iteration {}", r.iter));
        }
        first.get_or_insert(r.losses.total);
        last = r.losses.total;
    }
    Ok((trainer.model, first.unwrap_or(f64::NAN), last))
}

pub struct SmokeRuns {
    pub models: Vec<Model>,
}

fn smoke_config() -> TrainConfig {
    TrainConfig { iterations: SMOKE_ITERATIONS, batch_size: 8, ..TrainConfig::default() }
}

pub fn smoke(data: &Dataset, runs: &mut Option<SmokeRuns>) -> Result<String, String> {
    let start = Instant::now();
    let (mut firsts, mut lasts, mut models) = (Vec::new(), Vec::new(), Vec::new());
    for seed in SEEDS {
        let (model, first, last) = train(data, seed, smoke_config())?;
        firsts.push(first);
        lasts.push(last);
        models.push(model);
    }
    *runs = Some(SmokeRuns { models });
    let (m1, m200) = (median(firsts.clone()), median(lasts.clone()));
    let elapsed = start.elapsed();
    let detail = format!(
        "median total loss iter 1 = {m1:.4}, iter {SMOKE_ITERATIONS} = {m200:.4} (per seed {:?} -> {:?}); {:.0}s",
        firsts.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>(),
        lasts.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>(),
        elapsed.as_secs_f64()
    );
    if m200 < m1 && elapsed < SMOKE_BUDGET {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Only the final image of each sequence exists on disk: one image file
/// per manifest entry, while every sequence has several steps.
fn no_intermediate_images(dir: &Path, data: &Dataset) -> Result<(), String> {
    let images = std::fs::read_dir(dir.join("images")).map_err(|e| e.to_string())?.count();
    let entries = data.manifest.entries.len();
    if images != entries {
        return Err(format!("{images} image files for {entries} sequences"));
    }
    if let Some(ex) = data.examples.iter().find(|ex| ex.sequence.len() < 2) {
        return Err(format!("sequence {} has a single step", ex.image_id));
    }
    let manifest = std::fs::read_to_string(dir.join("manifest.json")).map_err(|e| e.to_string())?;
    let listed = manifest.matches(".png").count();
    if listed != entries {
        return Err(format!("manifest references {listed} images for {entries} sequences"));
    }
    Ok(())
}

pub fn ablation(data_dir: &Path, data: &Dataset, held: &Dataset, runs: Option<&SmokeRuns>) -> Result<String, String> {
    let start = Instant::now();
    no_intermediate_images(data_dir, data).map_err(|e| format!("structural check: {e}"))?;
    let runs = runs.ok_or("the default-weight runs from the smoke criterion are missing")?;
    let score = |m: &Model| evaluate_consistency(m, &held.examples, EVAL_SEED, RolloutMode::Incremental).map(|v| mean(&v)).map_err(|e| e.to_string());
    let default: Vec<f64> = runs.models.iter().map(score).collect::<Result<_, _>>()?;
    let mut ablated = Vec::new();
    for seed in SEEDS {
        let mut config = smoke_config();
        config.weights.perceptual = 0.0;
        let (model, _, _) = train(data, seed, config)?;
        ablated.push(score(&model)?);
    }
    let (d, a) = (median(default.clone()), median(ablated.clone()));
    let detail = format!(
        "no intermediate GT images; median consistency default {d:.5} vs perceptual weight 0 {a:.5} (per seed {default:.5?} vs {ablated:.5?}, {SMOKE_ITERATIONS} iterations); {:.0}s",
        start.elapsed().as_secs_f64()
    );
    if a > d {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn eval_consistency(checkpoint: &Path, dataset: &Path, independent: bool) -> serde_json::Value {
    let mut args = vec!["eval", "--checkpoint", s(checkpoint), "--dataset", s(dataset), "--metric", "consistency", "--seed", "99"];
    if independent {
        args.push("--independent");
    }
    serde_json::from_str(&run_ok(&args)).expect("eval prints a JSON report")
}

/// Full CLI pipeline: train for the direction-check schedule, then compare
/// incremental rollouts with independent regeneration per transition.
pub fn direction(work: &Path, train_dir: &Path, held_dir: &Path) -> Result<String, String> {
    let start = Instant::now();
    let config = work.join("direction.toml");
    let text = format!(
        "dataset = {:?}\nout_dir = \"direction\"\n\n[train]\niterations = {DIRECTION_ITERATIONS}\ncheckpoint_every = 500\nseed = 0\n",
        s(train_dir)
    );
    std::fs::write(&config, text).map_err(|e| e.to_string())?;
    let checkpoint = run_ok(&["train", "--config", s(&config)]);
    let checkpoint = Path::new(checkpoint.trim());
    let trained = start.elapsed();
    let inc = eval_consistency(checkpoint, held_dir, false);
    let ind = eval_consistency(checkpoint, held_dir, true);
    let per = |v: &serde_json::Value| -> Vec<f64> { v["breakdown"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect() };
    let (a, b) = (per(&inc), per(&ind));
    let sequences = inc["sequences"].as_u64().unwrap_or(0);
    let detail = format!(
        "{sequences} held-out sequences; incremental {a:.5?} vs independent {b:.5?} per transition; training {:.0}s",
        trained.as_secs_f64()
    );
    let lower = a.len() == b.len() && a.len() >= 2 && a.iter().zip(&b).all(|(x, y)| x < y);
    if lower && trained < DIRECTION_BUDGET {
        Ok(detail)
    } else {
        Err(detail)
    }
}
