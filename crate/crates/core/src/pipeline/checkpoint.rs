//! `PPTC` container: magic, version, a JSON header and a little-endian
//! payload holding parameters, optimizer moments and the embedding table.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::network::{EmbeddingTable, ModelConfig, ParamStore, SegModel};
use crate::optim::{AdamState, AdamW, OptimConfig};
use crate::pipeline::config::TrainSettings;
use crate::scalar::{Precision, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PPTC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub precision: Precision,
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub epoch: usize,
    pub step: usize,
    pub total_steps: usize,
    pub settings: Option<TrainSettings>,
    pub optim: Option<OptimConfig>,
    /// Per-parameter Adam step counts; present with the moments.
    pub adam_steps: Option<Vec<u64>>,
    pub embedding_bytes: usize,
    /// Metric log lines of the run so far.
    pub log: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: usize,
    pub total_steps: usize,
    pub settings: Option<TrainSettings>,
    pub log: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub model: SegModel<T>,
    pub optimizer: Option<AdamW<T>>,
    pub meta: CheckpointMeta,
}

/// A checkpoint of either precision.
#[derive(Clone, Debug)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn precision(&self) -> Precision {
        match self {
            AnyCheckpoint::F32(_) => Precision::F32,
            AnyCheckpoint::F64(_) => Precision::F64,
        }
    }

    pub fn meta(&self) -> &CheckpointMeta {
        match self {
            AnyCheckpoint::F32(c) => &c.meta,
            AnyCheckpoint::F64(c) => &c.meta,
        }
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let table = self.model.embedding_table().map(EmbeddingTable::to_bytes);
        let header = CheckpointHeader {
            precision: T::PRECISION,
            model: self.model.config().clone(),
            params: params
                .iter()
                .map(|(n, t)| ParamEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            epoch: self.meta.epoch,
            step: self.meta.step,
            total_steps: self.meta.total_steps,
            settings: self.meta.settings.clone(),
            optim: self.optimizer.as_ref().map(|o| o.config.clone()),
            adam_steps: self
                .optimizer
                .as_ref()
                .map(|o| o.states.iter().map(|s| s.t).collect()),
            embedding_bytes: table.as_ref().map_or(0, Vec::len),
            log: self.meta.log.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + params.num_values() * T::BYTES * 3);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in params.iter() {
            t.values().iter().for_each(|v| v.write_le(&mut out));
        }
        if let Some(opt) = &self.optimizer {
            for s in &opt.states {
                s.m.iter().chain(&s.v).for_each(|v| v.write_le(&mut out));
            }
        }
        if let Some(t) = table {
            out.extend_from_slice(&t);
        }
        Ok(out)
    }

    fn from_parts(header: CheckpointHeader, payload: &[u8]) -> Result<Self> {
        let mut cursor = 0usize;
        let mut take = |n: usize| -> Result<Vec<T>> {
            let bytes = n * T::BYTES;
            if cursor + bytes > payload.len() {
                return Err(Error::Checkpoint("payload truncated".into()));
            }
            let vals = payload[cursor..cursor + bytes]
                .chunks_exact(T::BYTES)
                .map(T::read_le)
                .collect();
            cursor += bytes;
            Ok(vals)
        };
        let mut store = ParamStore::new();
        for p in &header.params {
            let values = take(p.shape.iter().product())?;
            store.insert(p.name.clone(), Tensor::new(p.shape.clone(), values)?)?;
        }
        let optimizer = match (&header.optim, &header.adam_steps) {
            (Some(cfg), Some(steps)) => {
                if steps.len() != header.params.len() {
                    return Err(Error::Checkpoint("optimizer state count mismatch".into()));
                }
                let mut states = Vec::with_capacity(steps.len());
                for (p, &t) in header.params.iter().zip(steps) {
                    let n = p.shape.iter().product();
                    states.push(AdamState {
                        m: take(n)?,
                        v: take(n)?,
                        t,
                    });
                }
                Some(AdamW {
                    config: cfg.clone(),
                    states,
                })
            }
            _ => None,
        };
        let table = if header.embedding_bytes > 0 {
            let end = cursor + header.embedding_bytes;
            let bytes = payload
                .get(cursor..end)
                .ok_or_else(|| Error::Checkpoint("embedding table truncated".into()))?;
            cursor = end;
            Some(EmbeddingTable::from_bytes(bytes)?)
        } else {
            None
        };
        if cursor != payload.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing payload bytes",
                payload.len() - cursor
            )));
        }
        Ok(Self {
            model: SegModel::from_parts(header.model, store, table)?,
            optimizer,
            meta: CheckpointMeta {
                epoch: header.epoch,
                step: header.step,
                total_steps: header.total_steps,
                settings: header.settings,
                log: header.log,
            },
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("pptc.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

fn split(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Checkpoint("header truncated".into()))?;
    let header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((header, &bytes[16 + len..]))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<AnyCheckpoint> {
    let (header, payload) = split(bytes)?;
    Ok(match header.precision {
        Precision::F32 => AnyCheckpoint::F32(Checkpoint::from_parts(header, payload)?),
        Precision::F64 => AnyCheckpoint::F64(Checkpoint::from_parts(header, payload)?),
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AnyCheckpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// Header only, without decoding the payload.
pub fn read_checkpoint_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split(&bytes)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Alignment;

    fn small() -> ModelConfig {
        ModelConfig {
            stage_channels: vec![8, 16],
            stage_depths: vec![1, 1],
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = SegModel::<f32>::new(small(), 4, None).unwrap();
        let mut opt = AdamW::new(OptimConfig::default(), model.params()).unwrap();
        opt.states[0].t = 3;
        opt.states[0].m[0] = 0.25;
        let ck = Checkpoint {
            model,
            optimizer: Some(opt),
            meta: CheckpointMeta {
                epoch: 2,
                step: 7,
                total_steps: 9,
                settings: Some(TrainSettings::default()),
                log: vec!["epoch=1".into()],
            },
        };
        let bytes = ck.to_bytes().unwrap();
        let AnyCheckpoint::F32(back) = checkpoint_from_bytes(&bytes).unwrap() else {
            panic!("precision changed")
        };
        assert_eq!(back.model.params(), ck.model.params());
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn language_table_travels_along() {
        let cfg = ModelConfig {
            alignment: Alignment::La,
            embed_dim: 16,
            ..small()
        };
        let table = EmbeddingTable::orthonormal(16).unwrap();
        let model = SegModel::<f64>::new(cfg, 1, Some(table.clone())).unwrap();
        let ck = Checkpoint {
            model,
            optimizer: None,
            meta: CheckpointMeta::default(),
        };
        let AnyCheckpoint::F64(back) = checkpoint_from_bytes(&ck.to_bytes().unwrap()).unwrap()
        else {
            panic!("precision changed")
        };
        assert_eq!(back.model.embedding_table(), Some(&table));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let ck = Checkpoint {
            model: SegModel::<f32>::new(small(), 0, None).unwrap(),
            optimizer: None,
            meta: CheckpointMeta::default(),
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(
            checkpoint_from_bytes(b"NOPE0000000000000000"),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(
            checkpoint_from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            checkpoint_from_bytes(&extra),
            Err(Error::Checkpoint(_))
        ));
    }
}
