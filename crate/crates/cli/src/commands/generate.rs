use serde::Serialize;

use isggen_core::imageio::write_png;
use isggen_core::sgraph::deserialize_sequence;
use isggen_core::trainer::{rollout_images, RolloutMode};

use crate::commands::{create_dir, read_checkpoint, write_json};
use crate::error::{CliError, CliResult, Context, ExitKind};
use crate::GenerateArgs;

#[derive(Serialize)]
struct GeneratedStep {
    step_index: usize,
    new_node_ids: Vec<u32>,
    image: String,
}

#[derive(Serialize)]
struct GenerationDocument {
    config_hash: String,
    seed: u64,
    mode: RolloutMode,
    steps: Vec<GeneratedStep>,
}

pub fn run(args: &GenerateArgs) -> CliResult<()> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let model = ckpt.restore_model().context(ExitKind::Data, || format!("checkpoint {}", args.checkpoint.display()))?;
    let text = std::fs::read_to_string(&args.sequence).map_err(|e| CliError::data(format!("{}: {e}", args.sequence.display())))?;
    let sequence = deserialize_sequence(&text, &model.config.vocabulary)
        .context(ExitKind::Data, || format!("sequence {}", args.sequence.display()))?;
    let mode = if args.independent { RolloutMode::Independent } else { RolloutMode::Incremental };
    let images = rollout_images(&model, &sequence, args.seed, mode).context(ExitKind::Data, || "generation".into())?;

    create_dir(&args.out)?;
    let mut steps = Vec::with_capacity(images.len());
    for (k, image) in images.iter().enumerate() {
        let name = format!("step-{k}.png");
        write_png(&args.out.join(&name), image).context(ExitKind::Data, || format!("writing {name}"))?;
        steps.push(GeneratedStep { step_index: k, new_node_ids: sequence.new_nodes(k).iter().map(|n| n.0).collect(), image: name });
    }
    let doc = GenerationDocument { config_hash: model.config.hash(), seed: args.seed, mode, steps };
    write_json(&args.out.join("generation.json"), &doc)?;
    tracing::info!(steps = images.len(), out = %args.out.display(), "images written");
    Ok(())
}
