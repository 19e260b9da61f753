//! `isggen`: prepare datasets, train, generate, evaluate and serve.
//!
//! Exit statuses: 0 success, 2 configuration error, 3 data error,
//! 4 numeric failure (non-finite values during training), 1 anything else.

mod commands;
mod config;
mod error;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliResult;

#[derive(Parser)]
#[command(name = "isggen", version, about = "Incremental scene-graph-to-image generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a training dataset from synthetic scenes or COCO annotations.
    Prepare(PrepareArgs),
    /// Train a generator from a run configuration file.
    Train(TrainArgs),
    /// Generate the images of one graph sequence.
    Generate(GenerateArgs),
    /// Score a checkpoint on a prepared dataset.
    Eval(EvalArgs),
    /// Serve the session API for a checkpoint.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Source {
    Synth,
    Coco,
}

#[derive(Args)]
pub struct PrepareArgs {
    #[arg(long, value_enum, default_value = "synth", env = "ISGGEN_SOURCE")]
    pub source: Source,
    /// Output directory for the dataset.
    #[arg(long, env = "ISGGEN_OUT")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0, env = "ISGGEN_SEED")]
    pub seed: u64,
    /// Number of synthetic images, or the maximum number of COCO images kept.
    #[arg(long, env = "ISGGEN_COUNT")]
    pub count: Option<usize>,
    #[arg(long, default_value_t = 64, env = "ISGGEN_IMAGE_SIZE")]
    pub image_size: usize,
    #[arg(long, default_value_t = 16, env = "ISGGEN_MASK_SIZE")]
    pub mask_size: usize,
    /// Number of graph steps per sequence.
    #[arg(long, env = "ISGGEN_STEPS")]
    pub steps: Option<usize>,
    /// Split label recorded in the manifest.
    #[arg(long, default_value = "train", env = "ISGGEN_SPLIT")]
    pub split: String,
    /// COCO instance annotation file.
    #[arg(long, env = "ISGGEN_ANNOTATIONS", required_if_eq("source", "coco"))]
    pub annotations: Option<PathBuf>,
    /// Directory holding the COCO image files.
    #[arg(long, env = "ISGGEN_IMAGES", required_if_eq("source", "coco"))]
    pub images: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long, env = "ISGGEN_CONFIG")]
    pub config: PathBuf,
    /// Continue from a checkpoint; without a path, from the latest one in
    /// the run's output directory.
    #[arg(long, num_args = 0..=1, env = "ISGGEN_RESUME")]
    pub resume: Option<Option<PathBuf>>,
    /// Override a config value, e.g. `train.iterations=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", env = "ISGGEN_SET", value_delimiter = ';')]
    pub overrides: Vec<String>,
    #[arg(long, env = "ISGGEN_ITERATIONS")]
    pub iterations: Option<u64>,
    #[arg(long, env = "ISGGEN_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "ISGGEN_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long, env = "ISGGEN_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Sequence document (JSON).
    #[arg(long, env = "ISGGEN_SEQUENCE")]
    pub sequence: PathBuf,
    #[arg(long, env = "ISGGEN_OUT")]
    pub out: PathBuf,
    /// Regenerate every step from scratch instead of building on the
    /// previous image.
    #[arg(long, env = "ISGGEN_INDEPENDENT")]
    pub independent: bool,
    #[arg(long, default_value_t = 0, env = "ISGGEN_SEED")]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Is,
    Consistency,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, env = "ISGGEN_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "ISGGEN_DATASET")]
    pub dataset: PathBuf,
    #[arg(long, value_enum, env = "ISGGEN_METRIC")]
    pub metric: Metric,
    #[arg(long, env = "ISGGEN_INDEPENDENT")]
    pub independent: bool,
    #[arg(long, default_value_t = 0, env = "ISGGEN_SEED")]
    pub seed: u64,
    /// Number of splits for the Inception Score.
    #[arg(long, default_value_t = isggen_core::metrics::DEFAULT_SPLITS, env = "ISGGEN_SPLITS")]
    pub splits: usize,
    /// Crop classifier for the Inception Score. Without one, a classifier is
    /// trained on synthetic scenes (synthetic vocabulary only).
    #[arg(long, env = "ISGGEN_CLASSIFIER")]
    pub classifier: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long, env = "ISGGEN_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long, env = "ISGGEN_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080", env = "ISGGEN_ADDR")]
    pub addr: String,
    /// Session store directory.
    #[arg(long, env = "ISGGEN_STORE")]
    pub store: PathBuf,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Prepare(a) => commands::prepare::run(&a),
        Command::Train(a) => commands::train::run(&a),
        Command::Generate(a) => commands::generate::run(&a),
        Command::Eval(a) => commands::eval::run(&a),
        Command::Serve(a) => commands::serve::run(&a),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("ISGGEN_LOG").unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { error::ExitKind::Config as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!("{e}");
            ExitCode::from(e.kind as u8)
        }
    }
}
