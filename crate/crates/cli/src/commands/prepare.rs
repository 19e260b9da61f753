use isggen_core::dataio::{
    apply_filters, load_annotations, make_training_example, synth_shapes, synth_vocabulary, write_dataset, DatasetSpec, FilterStats,
};
use isggen_core::sgraph::DEFAULT_SPLIT_STEPS;

use crate::error::{CliError, CliResult, Context, ExitKind};
use crate::{PrepareArgs, Source};

const DEFAULT_SYNTH_COUNT: usize = 256;

pub fn run(args: &PrepareArgs) -> CliResult<()> {
    let spec = DatasetSpec {
        image_size: args.image_size,
        mask_size: args.mask_size,
        steps: args.steps.unwrap_or(DEFAULT_SPLIT_STEPS),
        split: args.split.clone(),
        ..DatasetSpec::default()
    };
    spec.validate().context(ExitKind::Config, || "dataset spec".into())?;

    let (vocabulary, stats, examples) = match args.source {
        Source::Synth => {
            let count = args.count.unwrap_or(DEFAULT_SYNTH_COUNT);
            let mut stats = FilterStats::default();
            let mut examples = Vec::with_capacity(count);
            for (img, _) in synth_shapes(count, args.seed, &spec).context(ExitKind::Data, || "synthetic scenes".into())? {
                let before = img.objects.len();
                let (kept, outcome) = apply_filters(img, &spec);
                stats.record(before, outcome);
                if let Some(img) = kept {
                    examples.push(make_training_example(&img, &spec, args.seed).context(ExitKind::Data, || "synthetic scenes".into())?);
                }
            }
            (synth_vocabulary(), stats, examples)
        }
        Source::Coco => {
            let (Some(ann), Some(images)) = (&args.annotations, &args.images) else {
                return Err(CliError::config("--source coco needs --annotations and --images"));
            };
            let mut stream = load_annotations(ann, &spec)
                .context(ExitKind::Data, || format!("annotations {}", ann.display()))?
                .with_images(images);
            let mut examples = Vec::new();
            while args.count.is_none_or(|c| examples.len() < c) {
                let Some(img) = stream.next() else { break };
                let img = img.context(ExitKind::Data, || format!("annotations {}", ann.display()))?;
                let id = img.image_id;
                examples.push(make_training_example(&img, &spec, args.seed).context(ExitKind::Data, || format!("image {id}"))?);
            }
            (stream.vocabulary().clone(), stream.stats(), examples)
        }
    };

    let source = match args.source {
        Source::Synth => "synth",
        Source::Coco => "coco",
    };
    let manifest = write_dataset(&args.out, source, args.seed, &spec, &vocabulary, stats, &examples)
        .context(ExitKind::Data, || format!("writing {}", args.out.display()))?;
    tracing::info!(
        images = manifest.entries.len(),
        seen = stats.images_seen,
        dir = %args.out.display(),
        "dataset written"
    );
    println!("{}", manifest.content_hash());
    Ok(())
}
