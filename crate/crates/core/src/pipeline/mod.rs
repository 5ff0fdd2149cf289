//! Training loop, evaluation, checkpoints and run configuration.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod train;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub use checkpoint::{
    checkpoint_from_bytes, load_checkpoint, read_checkpoint_header, AnyCheckpoint, Checkpoint,
    CheckpointHeader, CheckpointMeta,
};
pub use config::{AugmentConfig, RunConfig, TrainSettings};
pub use eval::{evaluate_model, evaluate_with, EvalReport};
pub use train::{batches_per_epoch, build_batches, subsample, EpochRecord, Trainer};

use crate::data::{ClassTaxonomy, DatasetManifest, PointScan, Split};
use crate::error::{Error, Result};
use crate::network::{EmbeddingTable, SegModel};
use crate::scalar::{Precision, Scalar};

pub const CHECKPOINT_FILE: &str = "checkpoint.pptc";
pub const METRICS_LOG_FILE: &str = "metrics.log";

pub fn load_scans(
    manifest: &DatasetManifest,
    taxonomy: &ClassTaxonomy,
    intensity_scale: f32,
) -> Result<Vec<PointScan>> {
    manifest
        .entries
        .iter()
        .map(|e| e.load(taxonomy, intensity_scale))
        .collect()
}

/// Outcome of a training run on disk.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
}

/// Loads data, trains for the configured epochs and writes a checkpoint and
/// a metric log line after every epoch. A failed epoch leaves the previous
/// checkpoint untouched.
pub fn run_training(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let taxonomy = cfg.load_taxonomy()?;
    let table = cfg.load_embedding(&taxonomy)?;
    let train_path = cfg
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("train_manifest is required for training".into()))?;
    let train = load_scans(
        &DatasetManifest::load(train_path, Split::Train)?,
        &taxonomy,
        cfg.intensity_scale,
    )?;
    let val = match &cfg.val_manifest {
        Some(p) => load_scans(
            &DatasetManifest::load(p, Split::Val)?,
            &taxonomy,
            cfg.intensity_scale,
        )?,
        None => Vec::new(),
    };
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, table, &train, &val),
        Precision::F64 => train_typed::<f64>(cfg, table, &train, &val),
    }
}

fn train_typed<T: Scalar>(
    cfg: &RunConfig,
    table: Option<EmbeddingTable>,
    train: &[PointScan],
    val: &[PointScan],
) -> Result<TrainOutcome> {
    let model = SegModel::<T>::new(cfg.model.clone(), cfg.train.seed, table)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), train)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let checkpoint = cfg.output_dir.join(CHECKPOINT_FILE);
    let metrics_log = cfg.output_dir.join(METRICS_LOG_FILE);
    fs::write(&metrics_log, "").map_err(|e| Error::io(&metrics_log, e))?;
    let mut lines = Vec::new();
    let records = trainer.run(train, val, |t, rec| {
        lines.push(rec.log_line());
        let ck = Checkpoint {
            model: t.model.clone(),
            optimizer: Some(t.optimizer.clone()),
            meta: CheckpointMeta {
                epoch: t.epoch,
                step: t.step,
                total_steps: t.total_steps,
                settings: Some(t.settings.clone()),
                log: lines.clone(),
            },
        };
        ck.save(&checkpoint)?;
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&metrics_log)
            .map_err(|e| Error::io(&metrics_log, e))?;
        writeln!(f, "{}", rec.log_line()).map_err(|e| Error::io(&metrics_log, e))
    })?;
    Ok(TrainOutcome {
        records,
        checkpoint,
        metrics_log,
    })
}

/// Evaluates a checkpoint on labelled manifests.
pub fn run_evaluation(
    checkpoint: &Path,
    manifests: &[PathBuf],
    split: Split,
    taxonomy: &ClassTaxonomy,
    intensity_scale: f32,
) -> Result<EvalReport> {
    let ck = load_checkpoint(checkpoint)?;
    let mut scans = Vec::new();
    for m in manifests {
        scans.extend(load_scans(
            &DatasetManifest::load(m, split)?,
            taxonomy,
            intensity_scale,
        )?);
    }
    if scans.is_empty() {
        return Err(Error::EmptyDataset("no scans to evaluate".into()));
    }
    let ignore = taxonomy.ignore_index();
    match &ck {
        AnyCheckpoint::F32(c) => evaluate_model(&c.model, &scans, ignore),
        AnyCheckpoint::F64(c) => evaluate_model(&c.model, &scans, ignore),
    }
}

/// Per-point predictions of a checkpoint for one scan.
pub fn predict_with(ck: &AnyCheckpoint, scan: &PointScan) -> Result<Vec<usize>> {
    match ck {
        AnyCheckpoint::F32(c) => c.model.predict_scan(scan),
        AnyCheckpoint::F64(c) => c.model.predict_scan(scan),
    }
}
