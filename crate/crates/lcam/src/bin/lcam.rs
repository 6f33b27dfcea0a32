//! Command-line front end: train attention heads, render explanations,
//! run the masking evaluation, and dump qualitative error reports.
//!
//! Exit codes: 0 on success, 1 for anything the user can fix (bad flags,
//! missing files, invalid configs, mismatched checkpoints), 2 for internal
//! errors (panics — always bugs worth reporting).

use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lcam::backbone::{zoo, ClassifierSplit, SplitPoint};
use lcam::checkpoint::{load_checkpoint, Checkpoint};
use lcam::config::{resolve_train_config, LossOverlay, TrainOverlay};
use lcam::dataset::{ingest_dataset, DatasetLayout, DatasetManifest, SubsetSpec};
use lcam::evaluation::{evaluate, EvalConfig, Explainer};
use lcam::inference::{explain, export_overlay, SaliencySource};
use lcam::preprocess::{eval_crop_rgb8, preprocess_eval};
use lcam::reports::{report_misclassifications, INDEX_FILE};
use lcam::training::{train, TrainOutputs, Variant};

#[derive(Parser)]
#[command(
    name = "lcam",
    version,
    about = "Class activation maps from a trainable attention head over a frozen classifier"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an attention head against a frozen classifier.
    Train(TrainArgs),
    /// Render the saliency map for one image.
    Explain(ExplainArgs),
    /// Score an explainer with the top-pixel masking protocol.
    Evaluate(EvaluateArgs),
    /// Write paired explanations for every image the model mislabels.
    ReportErrors(ReportErrorsArgs),
}

/// Hyper-parameter flags shared by `train`; every one of these overrides
/// both the config file and the preset.
#[derive(Args)]
struct HyperArgs {
    /// Masking regime: fm or img.
    #[arg(long, value_parser = Variant::from_str)]
    variant: Option<Variant>,
    /// Where to cut the backbone: last_conv or after_last_maxpool.
    #[arg(long, value_parser = SplitPoint::from_str)]
    split: Option<SplitPoint>,
    /// Images per optimisation step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Multiplier applied to the learning rate after every epoch.
    #[arg(long)]
    lr_decay: Option<f64>,
    /// Full passes over the dataset.
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed for initialisation, shuffling and crop placement.
    #[arg(long)]
    seed: Option<u64>,
    /// Weight of the smoothness (total-variation) term.
    #[arg(long)]
    lambda_tv: Option<f64>,
    /// Weight of the area term.
    #[arg(long)]
    lambda_av: Option<f64>,
    /// Weight of the classification term.
    #[arg(long)]
    lambda_ce: Option<f64>,
    /// Exponent inside the area term.
    #[arg(long)]
    av_exponent: Option<f64>,
}

impl HyperArgs {
    fn overlay(&self) -> TrainOverlay {
        TrainOverlay {
            variant: self.variant,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay_per_epoch: self.lr_decay,
            epochs: self.epochs,
            loss_weights: LossOverlay {
                lambda_tv: self.lambda_tv,
                lambda_av: self.lambda_av,
                lambda_ce: self.lambda_ce,
                av_exponent: self.av_exponent,
            },
            seed: self.seed,
            split_point: self.split,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Frozen classifier to explain: vgg16, resnet50 or tiny-cnn.
    #[arg(long)]
    backbone: String,
    /// Directory of training images.
    #[arg(long)]
    data: PathBuf,
    /// How images are organised under --data: class_dirs or flat.
    #[arg(long, default_value = "class_dirs", value_parser = DatasetLayout::from_str)]
    layout: DatasetLayout,
    /// Where to write the checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Where to write the per-step loss log as CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Named hyper-parameter preset: vgg16 or resnet50.
    #[arg(long)]
    preset: Option<String>,
    /// TOML config file layered between the preset and the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train on a seeded sample of this many images instead of all of them.
    #[arg(long)]
    sample: Option<usize>,
    /// Directory holding backbone weights (default: $LCAM_MODEL_DIR, then ./models).
    #[arg(long)]
    model_dir: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct ExplainArgs {
    /// Trained attention-head checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Image to explain.
    #[arg(long)]
    image: PathBuf,
    /// Class to explain (default: the model's own top-1 prediction).
    #[arg(long)]
    class: Option<usize>,
    /// Directory receiving <image>_sm.png, <image>_sm.npy and <image>_sm.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Directory holding backbone weights (default: $LCAM_MODEL_DIR, then ./models).
    #[arg(long)]
    model_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trained attention-head checkpoint; baselines reuse its backbone and
    /// ignore the attention weights.
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of evaluation images.
    #[arg(long)]
    data: PathBuf,
    /// How images are organised under --data: class_dirs or flat.
    #[arg(long, default_value = "class_dirs", value_parser = DatasetLayout::from_str)]
    layout: DatasetLayout,
    /// Map source to score: lcam, baseline_random or baseline_center.
    #[arg(long, default_value = "lcam", value_parser = SaliencySource::from_str)]
    method: SaliencySource,
    /// Comma-separated list of kept-pixel percentages.
    #[arg(long, value_delimiter = ',', default_value = "100,50,15")]
    nu: Vec<f64>,
    /// Evaluate a seeded sample of this many images instead of all of them.
    #[arg(long)]
    sample: Option<usize>,
    /// Seed for sampling and the random baseline.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the summary CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the full per-image records here as JSON.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Directory holding backbone weights (default: $LCAM_MODEL_DIR, then ./models).
    #[arg(long)]
    model_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportErrorsArgs {
    /// Trained attention-head checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of labelled images (class_dirs layout).
    #[arg(long)]
    data: PathBuf,
    /// Report a seeded sample of this many images instead of all of them.
    #[arg(long)]
    sample: Option<usize>,
    /// Seed for sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving the overlay pairs and index.json.
    #[arg(long)]
    out: PathBuf,
    /// Directory holding backbone weights (default: $LCAM_MODEL_DIR, then ./models).
    #[arg(long)]
    model_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version surface as Err here but are successes.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match std::panic::catch_unwind(AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
        Err(_) => {
            // The panic hook has already printed the message and location.
            eprintln!("internal error: this is a bug in lcam, please report it");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Explain(args) => cmd_explain(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::ReportErrors(args) => cmd_report_errors(args),
    }
}

/// Loads a checkpoint and the backbone it names, and verifies they match.
fn checkpointed_split(
    ckpt_path: &Path,
    model_dir: Option<&Path>,
) -> anyhow::Result<(Checkpoint, ClassifierSplit)> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let split = zoo::load_split(&ckpt.model_id, ckpt.config.split_point, model_dir)?;
    ckpt.bind(&split)?;
    Ok((ckpt, split))
}

fn ingest(
    data: &Path,
    layout: DatasetLayout,
    sample: Option<usize>,
    seed: u64,
) -> anyhow::Result<DatasetManifest> {
    let subset = sample.map(|size| SubsetSpec { seed, size });
    let manifest = ingest_dataset(data, layout, subset)?;
    for skipped in &manifest.skipped {
        eprintln!("skipping {}: {}", skipped.path.display(), skipped.reason);
    }
    Ok(manifest)
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = resolve_train_config(
        args.preset.as_deref(),
        args.config.as_deref(),
        &args.hyper.overlay(),
    )?;
    let split = zoo::load_split(&args.backbone, cfg.split_point, args.model_dir.as_deref())?;
    let manifest = ingest(&args.data, args.layout, args.sample, cfg.seed)?;
    let outputs = TrainOutputs {
        checkpoint: Some(&args.out),
        log: args.log.as_deref(),
    };
    let run = train(&split, &manifest, &cfg, outputs)?;

    println!(
        "trained {} ({} variant) for {} epochs on {} images",
        args.backbone,
        cfg.variant,
        cfg.epochs,
        manifest.len()
    );
    if let Some(final_epoch) = cfg.epochs.checked_sub(1) {
        if let Some(mean) = run.log.epoch_mean_total(final_epoch) {
            println!("final-epoch mean loss: {mean:.6}");
        }
    }
    println!("checkpoint: {}", args.out.display());
    if let Some(log) = &args.log {
        println!("loss log:   {}", log.display());
    }
    Ok(())
}

/// What `lcam explain` writes next to the overlay, for scripted callers.
#[derive(Serialize)]
struct ExplainRecord {
    image: PathBuf,
    class_index: usize,
    confidence: f64,
    overlay: String,
    map: String,
    /// Feature-extraction passes this command spent (1 to pick/score the
    /// class + 1 to explain it).
    feature_passes: u64,
}

fn cmd_explain(args: ExplainArgs) -> anyhow::Result<()> {
    let (ckpt, split) = checkpointed_split(&args.ckpt, args.model_dir.as_deref())?;
    let image = preprocess_eval(&args.image, split.input_spec())?;
    let scores = split.classify(&image)?;
    let class = args.class.unwrap_or_else(|| scores.argmax());
    let map = explain(&split, &ckpt.params, &image, Some(class))?;

    let stem = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;
    let png = args.out.join(format!("{stem}_sm.png"));
    let npy = args.out.join(format!("{stem}_sm.npy"));
    let photo = eval_crop_rgb8(&args.image, split.input_spec())?;
    export_overlay(&photo, &map, &png, &npy)?;

    let record = ExplainRecord {
        image: args.image.clone(),
        class_index: class,
        confidence: scores.prob(class)?,
        overlay: format!("{stem}_sm.png"),
        map: format!("{stem}_sm.npy"),
        feature_passes: split.feature_pass_count(),
    };
    let json_path = args.out.join(format!("{stem}_sm.json"));
    let json = serde_json::to_string_pretty(&record)?;
    std::fs::write(&json_path, json + "\n")
        .with_context(|| format!("cannot write {}", json_path.display()))?;

    println!(
        "class {} (confidence {:.4}) -> {}",
        class,
        record.confidence,
        png.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let (ckpt, split) = checkpointed_split(&args.ckpt, args.model_dir.as_deref())?;
    let manifest = ingest(&args.data, args.layout, None, args.seed)?;
    let cfg = EvalConfig {
        nu_list: args.nu.clone(),
        sample_count: args.sample,
        seed: args.seed,
    };
    let explainer = match args.method {
        SaliencySource::Lcam => Explainer::Lcam(&ckpt.params),
        SaliencySource::BaselineRandom => Explainer::BaselineRandom,
        SaliencySource::BaselineCenter => Explainer::BaselineCenter,
    };
    let report = evaluate(&split, explainer, &manifest, &cfg)?;

    for agg in &report.aggregates {
        println!(
            "nu={:>5}  AD={:.4}  IC={:.4}",
            agg.nu, agg.average_drop, agg.increase_confidence
        );
    }
    println!(
        "{} images, {} feature passes, {} skipped for zero score",
        report.records.len(),
        report.feature_passes,
        report.skipped_zero_score
    );
    match &args.out {
        Some(path) => {
            std::fs::write(path, report.to_csv())
                .with_context(|| format!("cannot write {}", path.display()))?;
            println!("summary: {}", path.display());
        }
        None => print!("{}", report.to_csv()),
    }
    if let Some(path) = &args.records {
        let json = serde_json::to_string_pretty(&report)?;
        std::fs::write(path, json + "\n")
            .with_context(|| format!("cannot write {}", path.display()))?;
        println!("records: {}", path.display());
    }
    Ok(())
}

fn cmd_report_errors(args: ReportErrorsArgs) -> anyhow::Result<()> {
    let (ckpt, split) = checkpointed_split(&args.ckpt, args.model_dir.as_deref())?;
    let manifest = ingest(&args.data, DatasetLayout::ClassDirs, args.sample, args.seed)?;
    let report = report_misclassifications(&split, &ckpt.params, &manifest, &args.out)?;
    println!(
        "{} of {} images disagree with their labels",
        report.cases.len(),
        report.scanned
    );
    println!("index: {}", args.out.join(INDEX_FILE).display());
    Ok(())
}
