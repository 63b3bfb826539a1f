use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use moext::config::RunConfig;
use moext::data::{
    generate_synthetic_dataset, load_image, load_manifest, preprocess_manifest, DatasetId,
    Manifest,
};
use moext::error::{Error, Result};
use moext::eval::{run_protocol, save_report, EvalOptions, Protocol};
use moext::model::{export_params, ModelConfig};
use moext::plot::{plot_confusion, plot_series};
use moext::training::{
    finetune, load_checkpoint, load_clips, pretrain, save_checkpoint,
    save_finetune_history, save_pretrain_history, Checkpoint, Phase,
};

#[derive(Parser)]
#[command(name = "moext", about = "Micro-expression recognition by motion feature extraction")]
struct Cli {
    /// TOML run configuration; CLI flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of LOSO folds to evaluate concurrently.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Force single-threaded, bit-reproducible execution.
    #[arg(long, global = true, default_value_t = false)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic face dataset with a manifest and landmarks.
    Synth(SynthArgs),
    /// Detect landmarks, align, and crop onset/apex frames to 224x224.
    Preprocess(PreprocessArgs),
    /// Self-supervised pre-training of the motion feature extractor.
    Pretrain(TrainArgs),
    /// Supervised fine-tuning of the classifier.
    Finetune(FinetuneArgs),
    /// Run a LOSO evaluation protocol end to end.
    Evaluate(EvaluateArgs),
    /// Dense optical flow statistics for a frame directory.
    Flow(FlowArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 6)]
    subjects: usize,
    #[arg(long, default_value_t = 3)]
    clips: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// One or more manifest CSVs.
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Pre-training checkpoint to initialize from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    /// Protocol name; overrides the config file.
    #[arg(long)]
    protocol: Option<String>,
    /// Shared pre-training checkpoint reused for every fold.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Skip pre-training entirely (fine-tune from random init).
    #[arg(long, default_value_t = false)]
    no_pretrain: bool,
    /// Pre-train per fold, excluding the held-out test subject.
    #[arg(long, default_value_t = false)]
    exclude_test_subjects_from_pretrain: bool,
}

#[derive(Args)]
struct FlowArgs {
    /// Directory of frames (sorted by file name).
    #[arg(long)]
    frames: PathBuf,
    /// Reference frame index (onset).
    #[arg(long, default_value_t = 0)]
    reference: usize,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Parse { .. } => 2,
        Error::Schema { .. } => 3,
        Error::Config(_) => 4,
        Error::Shape(_) => 5,
        Error::Numeric { .. } => 6,
        Error::Detection => 7,
        Error::Empty(_) => 8,
        Error::MissingDataset(_) => 9,
        Error::Checkpoint(_) => 10,
        Error::UnknownProtocol(_) => 11,
        Error::Io(_) => 12,
        Error::Csv(_) => 13,
        Error::Json(_) => 14,
        Error::Image(_) => 15,
    }
}

/// Read the dataset id from a manifest's first data row so callers don't
/// have to repeat it on the command line.
fn manifest_dataset_id(path: &Path) -> Result<DatasetId> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut record = csv::StringRecord::new();
    if !reader.read_record(&mut record)? {
        return Err(Error::Empty(format!("manifest {} has no rows", path.display())));
    }
    let field = record.get(0).unwrap_or("");
    DatasetId::from_str(field).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line: 2,
        msg: format!("unknown dataset_id {field:?}"),
    })
}

fn load_manifests(paths: &[PathBuf], macro_n: usize) -> Result<Vec<Manifest>> {
    paths
        .iter()
        .map(|p| {
            let id = manifest_dataset_id(p)?;
            load_manifest(p, id, macro_n)
        })
        .collect()
}

fn merge_for_training(manifests: Vec<Manifest>) -> Result<Manifest> {
    let first_id = manifests
        .first()
        .map(|m| m.dataset_id)
        .ok_or_else(|| Error::Empty("no manifests given".into()))?;
    let samples: Vec<_> = manifests.into_iter().flat_map(|m| m.samples).collect();
    Ok(Manifest::from_samples(first_id, samples))
}

fn resolve_run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    } else {
        cfg.train.seed = cfg.seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    if cfg.deterministic {
        cfg.jobs = 1;
    }
    if cfg.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn model_config(cfg: &RunConfig, num_classes: usize) -> Result<ModelConfig> {
    cfg.model_config(num_classes.max(2))
}

fn cmd_synth(cfg: &RunConfig, out: &Path, args: &SynthArgs) -> Result<()> {
    let manifest = generate_synthetic_dataset(out, args.subjects, args.clips, args.classes, cfg.seed)?;
    cfg.write_provenance(out)?;
    println!(
        "synth: wrote {} clips for {} subjects ({} classes) to {}",
        manifest.samples.len(),
        manifest.subjects().len(),
        manifest.label_schema.len(),
        out.display()
    );
    Ok(())
}

fn cmd_preprocess(cfg: &RunConfig, out: &Path, args: &PreprocessArgs) -> Result<()> {
    let id = manifest_dataset_id(&args.manifest)?;
    let manifest = load_manifest(&args.manifest, id, cfg.train.macro_pseudo_apex_n)?;
    let outcome = preprocess_manifest(&manifest, out)?;
    cfg.write_provenance(out)?;
    println!(
        "preprocess: {} clips cropped, {} skipped (no face), manifest at {}",
        outcome.manifest.samples.len(),
        outcome.skipped,
        out.join("manifest.csv").display()
    );
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, out: &Path, args: &TrainArgs) -> Result<()> {
    let manifests = load_manifests(&args.manifest, cfg.train.macro_pseudo_apex_n)?;
    let merged = merge_for_training(manifests)?;
    let model_cfg = model_config(cfg, merged.label_schema.len())?;
    let clips = load_clips(&merged, model_cfg.input_size)?;
    std::fs::create_dir_all(out)?;
    let ckpt_path = out.join("pretrain.ckpt");
    let run = pretrain(&model_cfg, &cfg.train, &clips, Some(&ckpt_path))?;
    save_pretrain_history(&run.history, &out.join("pretrain_loss.csv"))?;
    plot_series(
        &out.join("pretrain_loss.svg"),
        "pre-training loss",
        &[
            ("total", run.history.iter().map(|h| h.total).collect()),
            ("l_re", run.history.iter().map(|h| h.l_re).collect()),
            ("l_st", run.history.iter().map(|h| h.l_st).collect()),
            ("l_ss", run.history.iter().map(|h| h.l_ss).collect()),
        ],
    )?;
    cfg.write_provenance(out)?;
    let last = run.history.last().unwrap();
    println!(
        "pretrain: {} epochs, final total loss {:.6}, checkpoint at {}",
        run.history.len(),
        last.total,
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_finetune(cfg: &RunConfig, out: &Path, args: &FinetuneArgs) -> Result<()> {
    let id = manifest_dataset_id(&args.manifest)?;
    let manifest = load_manifest(&args.manifest, id, cfg.train.macro_pseudo_apex_n)?;
    let num_classes = manifest.label_schema.len();
    let model_cfg = model_config(cfg, num_classes)?;
    let clips = load_clips(&manifest, model_cfg.input_size)?;
    let pretrained = match &args.checkpoint {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    let run = finetune(&model_cfg, &cfg.train, pretrained.as_ref(), &clips, num_classes)?;
    let mut model = run.model;
    std::fs::create_dir_all(out)?;
    save_finetune_history(&run.history, &out.join("finetune_loss.csv"))?;
    plot_series(
        &out.join("finetune_loss.svg"),
        "fine-tuning",
        &[
            ("ce", run.history.iter().map(|h| h.ce).collect()),
            ("train_acc", run.history.iter().map(|h| h.train_acc).collect()),
        ],
    )?;
    let params: BTreeMap<String, ndarray::ArrayD<f32>> =
        export_params(&mut model).into_iter().collect();
    let ckpt = Checkpoint {
        phase: Phase::Finetune,
        model_cfg,
        train_cfg: cfg.train.clone(),
        epoch: run.history.last().map(|h| h.epoch).unwrap_or(0),
        pretrain_history: pretrained
            .map(|c| c.pretrain_history)
            .unwrap_or_default(),
        finetune_history: run.history.clone(),
        params,
    };
    let ckpt_path = out.join("finetune.ckpt");
    save_checkpoint(&ckpt, &ckpt_path)?;
    cfg.write_provenance(out)?;
    let last = run.history.last().unwrap();
    println!(
        "finetune: {} epochs, final ce {:.6}, train acc {:.4}, checkpoint at {}",
        run.history.len(),
        last.ce,
        last.train_acc,
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, out: &Path, args: &EvaluateArgs) -> Result<()> {
    let protocol_name = args.protocol.as_deref().unwrap_or(&cfg.protocol);
    let protocol = Protocol::from_str(protocol_name)?;
    let manifests = load_manifests(&args.manifest, cfg.train.macro_pseudo_apex_n)?;
    let shared = match &args.checkpoint {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    let opts = EvalOptions {
        protocol,
        model_cfg: model_config(cfg, 2)?,
        train_cfg: cfg.train.clone(),
        do_pretrain: !args.no_pretrain,
        exclude_test_subjects_from_pretrain: args.exclude_test_subjects_from_pretrain,
        shared_pretrain: shared,
        jobs: cfg.jobs,
    };
    let report = run_protocol(&opts, &manifests)?;
    std::fs::create_dir_all(out)?;
    save_report(&report, &out.join("report.json"), &out.join("metrics.csv"))?;
    plot_confusion(
        &out.join("confusion.svg"),
        &report.class_names,
        &report.aggregate_counts,
    )?;
    cfg.write_provenance(out)?;
    for row in &report.metrics {
        println!(
            "evaluate: {} {} uf1={:.4} uar={:.4} acc={:.4} n={}",
            row.protocol, row.dataset, row.uf1, row.uar, row.acc, row.n_samples
        );
    }
    if !report.excluded_labels.is_empty() {
        for (label, count) in &report.excluded_labels {
            eprintln!("warning: excluded {count} samples with label {label:?}");
        }
    }
    Ok(())
}

fn cmd_flow(cfg: &RunConfig, out: &Path, args: &FlowArgs) -> Result<()> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&args.frames)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.len() < 2 {
        return Err(Error::Empty(format!(
            "need at least 2 frames in {}",
            args.frames.display()
        )));
    }
    let frames: Vec<_> = paths.iter().map(|p| load_image(p)).collect::<Result<_>>()?;
    let stats = moext::flow::flow_stats(&frames, args.reference)?;
    std::fs::create_dir_all(out)?;
    let csv_path = out.join("flow_stats.csv");
    moext::flow::save_flow_csv(&stats, &csv_path)?;
    plot_series(
        &out.join("flow_magnitude.svg"),
        "mean flow magnitude vs reference",
        &[("mean_magnitude", stats.iter().map(|s| s.mean_magnitude).collect())],
    )?;
    cfg.write_provenance(out)?;
    println!(
        "flow: {} frames vs reference {}, stats at {}",
        frames.len(),
        args.reference,
        csv_path.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_run_config(cli)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match &cli.command {
        Command::Synth(args) => cmd_synth(&cfg, &out, args),
        Command::Preprocess(args) => cmd_preprocess(&cfg, &out, args),
        Command::Pretrain(args) => cmd_pretrain(&cfg, &out, args),
        Command::Finetune(args) => cmd_finetune(&cfg, &out, args),
        Command::Evaluate(args) => cmd_evaluate(&cfg, &out, args),
        Command::Flow(args) => cmd_flow(&cfg, &out, args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
