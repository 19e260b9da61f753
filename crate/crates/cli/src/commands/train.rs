use std::path::{Path, PathBuf};

use isggen_core::dataio::load_dataset;
use isggen_core::trainer::{Model, Trainer};

use crate::commands::{create_dir, read_checkpoint};
use crate::config::{load_run_config, ResolvedRun};
use crate::error::{CliError, CliResult, Context, ExitKind};
use crate::TrainArgs;

/// The checkpoint with the highest iteration number under `out_dir`.
fn latest_checkpoint(out_dir: &Path) -> CliResult<PathBuf> {
    let dir = out_dir.join("checkpoints");
    let entries = std::fs::read_dir(&dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .max()
        .ok_or_else(|| CliError::data(format!("no checkpoint to resume from in {}", dir.display())))
}

pub fn run(args: &TrainArgs) -> CliResult<()> {
    let mut run = load_run_config(&args.config, &args.overrides)?;
    if let Some(n) = args.iterations {
        run.train.iterations = n;
    }
    if let Some(s) = args.seed {
        run.train.seed = s;
    }
    if let Some(dir) = &args.out_dir {
        run.out_dir = dir.clone();
    }

    let dataset = load_dataset(&run.dataset).context(ExitKind::Data, || format!("dataset {}", run.dataset.display()))?;
    let resolved = ResolvedRun::new(&run, dataset.manifest.vocabulary.clone(), dataset.manifest.content_hash())?;
    let spec = &dataset.manifest.spec;
    if spec.image_size != resolved.model.image_size() || spec.mask_size != resolved.model.layout.mask_size {
        return Err(CliError::config(format!(
            "model produces {}px images with {}px masks but the dataset has {}px images with {}px masks",
            resolved.model.image_size(),
            resolved.model.layout.mask_size,
            spec.image_size,
            spec.mask_size
        )));
    }
    create_dir(&run.out_dir)?;
    resolved.write(&run.out_dir)?;

    let mut trainer = match &args.resume {
        None => Trainer::new(
            Model::new(&resolved.model, resolved.train.seed).context(ExitKind::Config, || "model".into())?,
            resolved.train.clone(),
        )
        .context(ExitKind::Config, || "trainer".into())?,
        Some(path) => {
            let path = match path {
                Some(p) => p.clone(),
                None => latest_checkpoint(&run.out_dir)?,
            };
            let mut ckpt = read_checkpoint(&path)?;
            if ckpt.model_config != resolved.model {
                return Err(CliError::config(format!(
                    "{} was trained with model config {}, the run file resolves to {}",
                    path.display(),
                    ckpt.model_config.hash(),
                    resolved.model.hash()
                )));
            }
            let mut expected = resolved.train.clone();
            expected.iterations = ckpt.train_config.iterations;
            expected.checkpoint_every = ckpt.train_config.checkpoint_every;
            if expected != ckpt.train_config {
                tracing::warn!("training settings differ from the checkpoint's; continuing with the run file's");
            }
            ckpt.train_config = resolved.train.clone();
            tracing::info!(iteration = ckpt.iteration, checkpoint = %path.display(), "resuming");
            Trainer::from_checkpoint(ckpt).context(ExitKind::Data, || format!("checkpoint {}", path.display()))?
        }
    };

    tracing::info!(hash = %resolved.hash, examples = dataset.examples.len(), iterations = resolved.train.iterations, "training");
    let outcome = trainer
        .run(&dataset.examples, &run.out_dir, |r| {
            if r.iter == 1 || r.iter % 50 == 0 {
                tracing::info!(iter = r.iter, total = r.losses.total, ms = r.elapsed_ms, "iteration");
            }
        })
        .context(ExitKind::Data, || "training".into())?;
    if let Some(path) = &outcome.last_checkpoint {
        println!("{}", path.display());
    }
    Ok(())
}
