use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ClassTaxonomy;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::network::{Alignment, EmbeddingTable, ModelConfig};
use crate::optim::OptimConfig;
use crate::scalar::Precision;

/// Optional training-time augmentation, all off by default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Random rotation about the vertical axis.
    pub rotate_z: bool,
    /// Random mirror of the x axis.
    pub flip_x: bool,
    /// Uniform coordinate jitter half-width in meters.
    pub jitter: f64,
}

/// Everything the training loop needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Scans larger than this are randomly subsampled each epoch.
    pub max_points: usize,
    /// Allow scans of different conditions in one batch.
    pub mixed_batches: bool,
    /// Overrides `epochs * batches_per_epoch` as the schedule length.
    pub total_steps: Option<usize>,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            batch_size: 4,
            max_points: 4096,
            mixed_batches: false,
            total_steps: None,
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.max_points == 0 {
            return Err(Error::Config(
                "epochs, batch_size and max_points must be >= 1".into(),
            ));
        }
        if !(self.augment.jitter >= 0.0) {
            return Err(Error::Config("augment.jitter must be non-negative".into()));
        }
        self.loss.validate()?;
        self.optim.validate()
    }
}

/// A training or evaluation run as read from a TOML file. Relative paths
/// resolve against the file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub precision: Precision,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    /// Raw-id remap table; the identity 0..7 mapping when absent.
    pub taxonomy: Option<PathBuf>,
    /// Class embedding file, required by the language head.
    pub embedding: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Raw intensities are divided by this on load.
    pub intensity_scale: f32,
    pub model: ModelConfig,
    pub train: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F32,
            train_manifest: None,
            val_manifest: None,
            taxonomy: None,
            embedding: None,
            output_dir: PathBuf::from("run"),
            intensity_scale: 1.0,
            model: ModelConfig::default(),
            train: TrainSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut cfg.train_manifest,
            &mut cfg.val_manifest,
            &mut cfg.taxonomy,
            &mut cfg.embedding,
        ]
        .into_iter()
        .flatten()
        {
            resolve(p);
        }
        resolve(&mut cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or_else(|| Path::new("."))).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.intensity_scale > 0.0) {
            return Err(Error::Config("intensity_scale must be positive".into()));
        }
        if self.model.alignment == Alignment::La && self.embedding.is_none() {
            return Err(Error::Config(
                "alignment = \"la\" requires an embedding file".into(),
            ));
        }
        Ok(())
    }

    pub fn load_taxonomy(&self) -> Result<ClassTaxonomy> {
        match &self.taxonomy {
            Some(p) => ClassTaxonomy::load(p),
            None => Ok(ClassTaxonomy::direct()),
        }
    }

    /// Loads and validates the embedding table when the language head is
    /// configured. A missing or unreadable file is a configuration error.
    pub fn load_embedding(&self, taxonomy: &ClassTaxonomy) -> Result<Option<EmbeddingTable>> {
        if self.model.alignment != Alignment::La {
            return Ok(None);
        }
        let path = self
            .embedding
            .as_ref()
            .ok_or_else(|| Error::Config("alignment = \"la\" requires an embedding file".into()))?;
        let table = EmbeddingTable::load(path).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!(
                "cannot read embedding file {}: {source}",
                path.display()
            )),
            other => other,
        })?;
        table.validate(taxonomy)?;
        Ok(Some(table))
    }

    pub fn ignore_index(&self) -> usize {
        self.train.loss.ignore_index
    }
}
