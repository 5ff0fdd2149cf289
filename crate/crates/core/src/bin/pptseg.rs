use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pptseg::data::{
    label_distribution, read_labels, read_scan, ClassTaxonomy, ConditionTag, DatasetManifest, Split,
};
use pptseg::metrics::{error_colors, write_ply};
use pptseg::network::Alignment;
use pptseg::pipeline::{
    load_checkpoint, predict_with, read_checkpoint_header, run_evaluation, run_training, RunConfig,
};
use pptseg::synthetic::{synthetic_dataset, synthetic_run_config, write_dataset, SyntheticConfig};
use pptseg::{Error, Result};

#[derive(Parser)]
#[command(
    name = "pptseg",
    version,
    about = "Multi-platform LiDAR semantic segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on labelled manifests.
    Eval(EvalArgs),
    /// Print per-class label fractions of a manifest.
    Stats(StatsArgs),
    /// Write a PLY with correct/missed/false-alarm point colors.
    ExportErrors(ExportArgs),
    /// Print a checkpoint's header.
    InspectCheckpoint { checkpoint: PathBuf },
    /// Generate a synthetic multi-platform dataset and a matching `run.toml`.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    alignment: Option<Alignment>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Raw-id remap table; identity mapping when absent.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    intensity_scale: f32,
}

impl DataArgs {
    fn taxonomy(&self) -> Result<ClassTaxonomy> {
        match &self.taxonomy {
            Some(p) => ClassTaxonomy::load(p),
            None => Ok(ClassTaxonomy::direct()),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "manifest", required = true)]
    manifests: Vec<PathBuf>,
    #[arg(long, default_value = "val")]
    split: Split,
    #[command(flatten)]
    data: DataArgs,
    /// Also write a flat key=value report here.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    name: String,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "train")]
    split: Split,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scan: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    condition: ConditionTag,
    #[arg(long)]
    out: PathBuf,
    /// Color misses red and false alarms blue for this class only.
    #[arg(long)]
    class: Option<String>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    scans_per_platform: usize,
    #[arg(long, default_value_t = 500)]
    points: usize,
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(a) = args.alignment {
        cfg.model.alignment = a;
    }
    if let Some(o) = args.output_dir {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    let outcome = run_training(&cfg)?;
    for r in &outcome.records {
        println!("{}", r.log_line());
    }
    println!("checkpoint: {}", outcome.checkpoint.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let tax = args.data.taxonomy()?;
    let report = run_evaluation(
        &args.checkpoint,
        &args.manifests,
        args.split,
        &tax,
        args.data.intensity_scale,
    )?;
    print!("{}", report.render(&args.name, tax.superclass_names()));
    if let Some(p) = &args.report {
        fs::write(p, report.key_values(tax.superclass_names())).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn stats(args: StatsArgs) -> Result<()> {
    let tax = args.data.taxonomy()?;
    let manifest = DatasetManifest::load(&args.manifest, args.split)?;
    let dist = label_distribution(&manifest, &tax);
    for (path, err) in &dist.skipped {
        log::warn!("skipped {}: {err}", path.display());
    }
    print!(
        "{}",
        dist.render(&tax, &args.manifest.display().to_string())
    );
    Ok(())
}

fn export_errors(args: ExportArgs) -> Result<()> {
    let tax = args.data.taxonomy()?;
    let selected = match &args.class {
        Some(name) => Some(
            tax.class_index(name)
                .ok_or_else(|| Error::Config(format!("unknown class {name:?}")))?,
        ),
        None => None,
    };
    let ck = load_checkpoint(&args.checkpoint)?;
    let scan = read_scan(&args.scan, args.condition, args.data.intensity_scale)?;
    let gt = read_labels(&args.labels, &tax, Some(scan.len()))?;
    let pred = predict_with(&ck, &scan)?;
    let colors = error_colors(&pred, &gt, selected, tax.ignore_index())?;
    write_ply(&args.out, scan.coords(), &colors)?;
    println!("wrote {} points to {}", scan.len(), args.out.display());
    Ok(())
}

fn inspect(path: PathBuf) -> Result<()> {
    let h = read_checkpoint_header(&path)?;
    let values: usize = h
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    println!("precision: {}", h.precision);
    println!("alignment: {}", h.model.alignment);
    let conds: Vec<&str> = h
        .model
        .conditions
        .iter()
        .map(ConditionTag::as_str)
        .collect();
    println!("conditions: {}", conds.join(", "));
    println!("stage_channels: {:?}", h.model.stage_channels);
    println!("epoch: {}  step: {}/{}", h.epoch, h.step, h.total_steps);
    println!("parameters: {} tensors, {values} values", h.params.len());
    println!(
        "optimizer state: {}",
        if h.adam_steps.is_some() { "yes" } else { "no" }
    );
    for line in &h.log {
        println!("  {line}");
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        points_per_scan: args.points,
        scans_per_platform: args.scans_per_platform,
        ..SyntheticConfig::default()
    };
    let train = synthetic_dataset(&cfg, args.seed)?;
    let val = synthetic_dataset(&cfg, args.seed.wrapping_add(1))?;
    write_dataset(&args.out, "train", Split::Train, &train, 0.0, args.seed)?;
    write_dataset(&args.out, "val", Split::Val, &val, 0.0, args.seed)?;
    let run = args.out.join("run.toml");
    fs::write(&run, synthetic_run_config().to_toml()?).map_err(|e| Error::io(&run, e))?;
    println!(
        "wrote {} train and {} val scans to {}",
        train.len(),
        val.len(),
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Stats(a) => stats(a),
        Command::ExportErrors(a) => export_errors(a),
        Command::InspectCheckpoint { checkpoint } => inspect(checkpoint),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
