use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::taxonomy::{remap_labels, ClassTaxonomy};
use crate::error::{Error, Result};

const POINT_RECORD_BYTES: usize = 16;
const LABEL_RECORD_BYTES: usize = 4;

/// Identifier of the recording platform a scan came from.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ConditionTag(String);

impl ConditionTag {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::Config("condition tag is empty".into()));
        }
        if name.chars().any(|c| c.is_uppercase() || c.is_whitespace()) {
            return Err(Error::Config(format!(
                "condition tag {name:?} must be lowercase without whitespace"
            )));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn defaults() -> Vec<ConditionTag> {
        ["car", "alice", "spot"]
            .into_iter()
            .map(|s| ConditionTag(s.to_string()))
            .collect()
    }
}

impl TryFrom<String> for ConditionTag {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        Self::new(value)
    }
}

impl std::str::FromStr for ConditionTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::new(s)
    }
}

impl From<ConditionTag> for String {
    fn from(tag: ConditionTag) -> String {
        tag.0
    }
}

impl fmt::Display for ConditionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One LiDAR scan with optional superclass labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointScan {
    coords: Vec<[f32; 3]>,
    intensity: Vec<f32>,
    labels: Option<Vec<usize>>,
    condition: ConditionTag,
}

impl PointScan {
    pub fn new(
        coords: Vec<[f32; 3]>,
        intensity: Vec<f32>,
        labels: Option<Vec<usize>>,
        condition: ConditionTag,
    ) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::shape("PointScan", "scan has no points"));
        }
        if intensity.len() != coords.len() {
            return Err(Error::shape(
                "PointScan",
                format!(
                    "{} intensities for {} points",
                    intensity.len(),
                    coords.len()
                ),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != coords.len() {
                return Err(Error::LabelMismatch {
                    labels: l.len(),
                    points: coords.len(),
                });
            }
        }
        if let Some(i) = coords
            .iter()
            .zip(&intensity)
            .position(|(p, s)| !(p.iter().all(|v| v.is_finite()) && s.is_finite()))
        {
            return Err(Error::CorruptData {
                path: "<memory>".into(),
                index: i,
            });
        }
        Ok(Self {
            coords,
            intensity,
            labels,
            condition,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f32; 3]] {
        &self.coords
    }

    pub fn intensity(&self) -> &[f32] {
        &self.intensity
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn condition(&self) -> &ConditionTag {
        &self.condition
    }

    pub fn with_condition(mut self, condition: ConditionTag) -> Self {
        self.condition = condition;
        self
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::LabelMismatch {
                labels: labels.len(),
                points: self.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Subset of points in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let coords = indices.iter().map(|&i| self.coords[i]).collect();
        let intensity = indices.iter().map(|&i| self.intensity[i]).collect();
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(coords, intensity, labels, self.condition.clone())
    }

    /// Per-point input features `(x, y, z, intensity)`.
    pub fn features(&self) -> Vec<[f32; 4]> {
        self.coords
            .iter()
            .zip(&self.intensity)
            .map(|(p, &i)| [p[0], p[1], p[2], i])
            .collect()
    }
}

/// Reads a KITTI-style binary scan: little-endian `f32` x, y, z, intensity per point.
pub fn read_scan(
    path: impl AsRef<Path>,
    condition: ConditionTag,
    intensity_scale: f32,
) -> Result<PointScan> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || bytes.len() % POINT_RECORD_BYTES != 0 {
        return Err(Error::MalformedScan {
            path: path.into(),
            reason: format!(
                "size {} is not a positive multiple of {POINT_RECORD_BYTES}",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / POINT_RECORD_BYTES;
    let mut coords = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(POINT_RECORD_BYTES).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
        let (x, y, z, s) = (f(0), f(1), f(2), f(3));
        if ![x, y, z, s].iter().all(|v| v.is_finite()) {
            return Err(Error::CorruptData {
                path: path.into(),
                index: i,
            });
        }
        coords.push([x, y, z]);
        intensity.push(s / intensity_scale);
    }
    PointScan::new(coords, intensity, None, condition)
}

pub fn write_scan(path: impl AsRef<Path>, scan: &PointScan, intensity_scale: f32) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(scan.len() * POINT_RECORD_BYTES);
    for (p, &s) in scan.coords.iter().zip(&scan.intensity) {
        for v in [p[0], p[1], p[2], s * intensity_scale] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads raw semantic ids (low 16 bits of each little-endian `u32` record).
pub fn read_raw_labels(path: impl AsRef<Path>) -> Result<Vec<u16>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % LABEL_RECORD_BYTES != 0 {
        return Err(Error::MalformedScan {
            path: path.into(),
            reason: format!(
                "label file size {} is not a multiple of {LABEL_RECORD_BYTES}",
                bytes.len()
            ),
        });
    }
    Ok(bytes
        .chunks_exact(LABEL_RECORD_BYTES)
        .map(|r| (u32::from_le_bytes(r.try_into().unwrap()) & 0xFFFF) as u16)
        .collect())
}

/// Reads a label file and remaps it to superclasses. `expected_len` is the
/// point count of the paired scan, when there is one.
pub fn read_labels(
    path: impl AsRef<Path>,
    taxonomy: &ClassTaxonomy,
    expected_len: Option<usize>,
) -> Result<Vec<usize>> {
    let raw = read_raw_labels(path)?;
    if let Some(n) = expected_len {
        if raw.len() != n {
            return Err(Error::LabelMismatch {
                labels: raw.len(),
                points: n,
            });
        }
    }
    Ok(remap_labels(&raw, taxonomy))
}

/// Writes full 32-bit label records.
pub fn write_raw_labels(path: impl AsRef<Path>, records: &[u32]) -> Result<()> {
    let path = path.as_ref();
    let out: Vec<u8> = records.iter().flat_map(|r| r.to_le_bytes()).collect();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
