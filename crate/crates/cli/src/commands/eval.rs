use isggen_core::dataio::{load_dataset, synth_vocabulary};
use isggen_core::metrics::{evaluate_consistency, evaluate_inception, ClassifierTraining, CropClassifier, MetricKind, MetricReport};
use isggen_core::trainer::RolloutMode;

use crate::commands::{read_checkpoint, write_json};
use crate::error::{CliError, CliResult, Context, ExitKind};
use crate::{EvalArgs, Metric};

fn classifier(args: &EvalArgs, num_categories: usize, synthetic: bool) -> CliResult<CropClassifier> {
    let clf = match &args.classifier {
        Some(path) => CropClassifier::load(path).context(ExitKind::Data, || format!("classifier {}", path.display()))?,
        None if synthetic => {
            tracing::info!("training a crop classifier on synthetic scenes");
            CropClassifier::train_on_synth(&ClassifierTraining::default()).context(ExitKind::Numeric, || "classifier".into())?
        }
        None => return Err(CliError::config("--metric is needs --classifier for datasets with a non-synthetic vocabulary")),
    };
    if clf.num_classes != num_categories {
        return Err(CliError::config(format!(
            "classifier has {} classes but the vocabulary has {num_categories} categories",
            clf.num_classes
        )));
    }
    Ok(clf)
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let model = ckpt.restore_model().context(ExitKind::Data, || format!("checkpoint {}", args.checkpoint.display()))?;
    let dataset = load_dataset(&args.dataset).context(ExitKind::Data, || format!("dataset {}", args.dataset.display()))?;
    let vocab = &model.config.vocabulary;
    if dataset.manifest.vocabulary != *vocab {
        return Err(CliError::data("the dataset's vocabulary differs from the checkpoint's"));
    }
    if dataset.manifest.spec.image_size != model.image_size() {
        return Err(CliError::data(format!(
            "dataset images are {}px, the model generates {}px",
            dataset.manifest.spec.image_size,
            model.image_size()
        )));
    }
    let mode = if args.independent { RolloutMode::Independent } else { RolloutMode::Incremental };
    let examples = &dataset.examples;

    let (metric, value, stddev, breakdown) = match args.metric {
        Metric::Consistency => {
            let per = evaluate_consistency(&model, examples, args.seed, mode).context(ExitKind::Data, || "consistency".into())?;
            let mean = per.iter().sum::<f64>() / per.len() as f64;
            (MetricKind::Consistency, mean, population_std(&per), per)
        }
        Metric::Is => {
            let clf = classifier(args, vocab.num_categories(), *vocab == synth_vocabulary())?;
            let per = evaluate_inception(&model, examples, &clf, args.seed, mode, args.splits)
                .context(ExitKind::Data, || "inception score".into())?;
            let (mean, std) = *per.last().ok_or_else(|| CliError::data("dataset has no sequences"))?;
            (MetricKind::Is, mean, std, per.iter().map(|p| p.0).collect())
        }
    };
    let report = MetricReport {
        metric,
        value,
        stddev,
        config_hash: model.config.hash(),
        dataset_id: dataset.manifest.content_hash(),
        mode,
        breakdown,
        sequences: examples.len(),
    };
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
