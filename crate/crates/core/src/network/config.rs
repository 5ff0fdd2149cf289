use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ConditionTag;
use crate::error::{Error, Result};
use crate::serialization::{Curve, DEFAULT_BITS_PER_AXIS, MAX_BITS_PER_AXIS};

/// Which segmentation head sits on top of the shared backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    /// Cosine similarity against fixed class text embeddings.
    La,
    /// One linear head per condition.
    #[default]
    Da,
}

impl fmt::Display for Alignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Alignment::La => "la",
            Alignment::Da => "da",
        })
    }
}

impl FromStr for Alignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "la" | "language" => Ok(Alignment::La),
            "da" | "decoupled" => Ok(Alignment::Da),
            _ => Err(Error::Config(format!(
                "unknown alignment {s:?} (expected la or da)"
            ))),
        }
    }
}

/// Shape of the PTv3-lite backbone and its heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub heads: usize,
    pub patch_size: usize,
    pub pool_stride: u32,
    pub curve: Curve,
    /// Per-stage curve override; `curve` applies where absent.
    pub stage_curves: Option<Vec<Curve>>,
    pub voxel_size: f64,
    pub bits_per_axis: u32,
    pub conditions: Vec<ConditionTag>,
    /// Tags routed onto another tag's parameters (e.g. `spot1 = "spot"`).
    pub condition_aliases: BTreeMap<String, ConditionTag>,
    pub alignment: Alignment,
    /// Width of the class embedding space used by the language head.
    pub embed_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 4,
            stage_channels: vec![32, 64, 128],
            stage_depths: vec![1, 1, 1],
            heads: 2,
            patch_size: 64,
            pool_stride: 2,
            curve: Curve::Hilbert,
            stage_curves: None,
            voxel_size: 0.05,
            bits_per_axis: DEFAULT_BITS_PER_AXIS,
            conditions: ConditionTag::defaults(),
            condition_aliases: BTreeMap::new(),
            alignment: Alignment::Da,
            embed_dim: 512,
            mlp_ratio: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_channels != 4 {
            return fail(format!(
                "input_channels must be 4, got {}",
                self.input_channels
            ));
        }
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_depths.len() {
            return fail(format!(
                "stage_channels {:?} and stage_depths {:?} must be non-empty and equal length",
                self.stage_channels, self.stage_depths
            ));
        }
        if self.heads == 0 {
            return fail("heads must be >= 1".into());
        }
        if let Some(c) = self
            .stage_channels
            .iter()
            .find(|&&c| c == 0 || c % self.heads != 0)
        {
            return fail(format!(
                "stage channel {c} is not a positive multiple of heads {}",
                self.heads
            ));
        }
        if self.patch_size == 0 {
            return fail("patch_size must be >= 1".into());
        }
        if self.pool_stride < 2 || !self.pool_stride.is_power_of_two() {
            return fail(format!(
                "pool_stride must be a power of two >= 2, got {}",
                self.pool_stride
            ));
        }
        if let Some(curves) = &self.stage_curves {
            if curves.len() != self.stage_channels.len() {
                return fail(format!(
                    "stage_curves has {} entries for {} stages",
                    curves.len(),
                    self.stage_channels.len()
                ));
            }
        }
        if !(self.voxel_size > 0.0) {
            return fail(format!(
                "voxel_size must be positive, got {}",
                self.voxel_size
            ));
        }
        if self.bits_per_axis == 0 || self.bits_per_axis > MAX_BITS_PER_AXIS {
            return fail(format!("bits_per_axis must be in 1..={MAX_BITS_PER_AXIS}"));
        }
        if self.conditions.is_empty() {
            return fail("at least one condition is required".into());
        }
        for (i, c) in self.conditions.iter().enumerate() {
            if self.conditions[..i].contains(c) {
                return fail(format!("duplicate condition {c}"));
            }
        }
        for (from, to) in &self.condition_aliases {
            if !self.conditions.contains(to) {
                return fail(format!(
                    "alias {from} -> {to} targets an unconfigured condition"
                ));
            }
        }
        if self.embed_dim == 0 || self.mlp_ratio == 0 {
            return fail("embed_dim and mlp_ratio must be >= 1".into());
        }
        Ok(())
    }

    pub fn curve_for_stage(&self, stage: usize) -> Curve {
        self.stage_curves
            .as_ref()
            .and_then(|c| c.get(stage).copied())
            .unwrap_or(self.curve)
    }

    /// Resolves aliases; errors for tags that map to no configured condition.
    pub fn resolve_condition<'a>(&'a self, tag: &'a ConditionTag) -> Result<&'a ConditionTag> {
        let target = self.condition_aliases.get(tag.as_str()).unwrap_or(tag);
        if self.conditions.contains(target) {
            Ok(target)
        } else {
            Err(Error::UnknownCondition(tag.to_string()))
        }
    }

    /// Feature width of the decoder output.
    pub fn output_channels(&self) -> usize {
        self.stage_channels[0]
    }

    /// Every configured tag routed onto the first one: one shared set of
    /// affines and heads.
    pub fn aliased_to_single(&self) -> Self {
        let mut out = self.clone();
        let keep = self.conditions[0].clone();
        for c in &self.conditions[1..] {
            out.condition_aliases.insert(c.to_string(), keep.clone());
        }
        for target in out.condition_aliases.values_mut() {
            *target = keep.clone();
        }
        out.conditions = vec![keep];
        out
    }
}
