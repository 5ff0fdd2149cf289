//! Procedural multi-platform scenes with known labels.
//!
//! Every scene is a 10 m square patch of ground split by a random line into
//! paved and natural halves, plus a wall, a tree crown, a car, a few
//! obstacles and a pedestrian placed at random. Each class reflects in its
//! own intensity band; platform `p` rotates the bands by `p * shift`
//! (wrapping in `[0, 1)`), so intensities mean different classes on
//! different platforms. Platforms also differ in coordinate noise.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    write_raw_labels, write_scan, ClassTaxonomy, ConditionTag, DatasetManifest, ManifestEntry,
    PointScan, Split, NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::pipeline::{RunConfig, TrainSettings};
use crate::scalar::Precision;

const STRUCTURE: usize = 0;
const PAVED: usize = 1;
const NATURAL: usize = 2;
const OBSTACLE: usize = 3;
const VEHICLE: usize = 4;
const VEGETATION: usize = 5;
const HUMAN: usize = 6;

/// Raw label id written for points outside the taxonomy.
pub const UNLABELED_RAW_ID: u32 = 99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub points_per_scan: usize,
    pub scans_per_platform: usize,
    pub conditions: Vec<ConditionTag>,
    /// Band rotation per platform index, as a fraction of the unit range.
    pub intensity_shift: f64,
    pub intensity_noise: f64,
    /// Per-platform coordinate noise std in meters, cycled over platforms.
    pub coord_noise: Vec<f64>,
    /// Fraction of points written with a raw id outside the taxonomy.
    pub unlabeled_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            points_per_scan: 500,
            scans_per_platform: 2,
            conditions: ConditionTag::defaults(),
            intensity_shift: 3.0 / NUM_CLASSES as f64,
            intensity_noise: 0.01,
            coord_noise: vec![0.01, 0.02, 0.03],
            unlabeled_fraction: 0.0,
        }
    }
}

/// Class mixture for a scene, summing to 1.
const CLASS_SHARE: [f64; NUM_CLASSES] = [0.15, 0.2, 0.2, 0.1, 0.12, 0.15, 0.08];

fn band(class: usize, platform: usize, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> f32 {
    let base = (class as f64 + 0.5) / NUM_CLASSES as f64;
    let v = base
        + platform as f64 * cfg.intensity_shift
        + cfg.intensity_noise * (rng.gen::<f64>() * 2.0 - 1.0);
    v.rem_euclid(1.0) as f32
}

fn box_surface(rng: &mut ChaCha8Rng, center: [f64; 3], half: [f64; 3]) -> [f64; 3] {
    let axis = rng.gen_range(0..3);
    let mut p = [0.0; 3];
    for a in 0..3 {
        p[a] = center[a]
            + if a == axis {
                if rng.gen() {
                    half[a]
                } else {
                    -half[a]
                }
            } else {
                rng.gen_range(-half[a]..half[a])
            };
    }
    p
}

/// One labelled scene for platform index `platform`.
pub fn synthetic_scan(cfg: &SyntheticConfig, platform: usize, seed: u64) -> Result<PointScan> {
    let condition = cfg
        .conditions
        .get(platform)
        .cloned()
        .ok_or_else(|| Error::Config(format!("platform index {platform} out of range")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = cfg
        .coord_noise
        .get(platform % cfg.coord_noise.len().max(1))
        .copied()
        .unwrap_or(0.0);
    let split_angle = rng.gen_range(0.0..TAU);
    let split_offset = rng.gen_range(-2.0..2.0);
    let (sn, cs) = split_angle.sin_cos();
    let wall_side = rng.gen_range(0..4);
    let tree = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), 2.5];
    let car = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), 0.75];
    let car_yaw = rng.gen_range(0.0..TAU);
    let obstacles: Vec<[f64; 3]> = (0..3)
        .map(|_| [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), 0.4])
        .collect();
    let person = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];

    let n = cfg.points_per_scan;
    let mut coords = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut r = rng.gen::<f64>();
        let mut class = 0;
        while class + 1 < NUM_CLASSES && r >= CLASS_SHARE[class] {
            r -= CLASS_SHARE[class];
            class += 1;
        }
        let p = match class {
            PAVED | NATURAL => {
                let (x, y) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
                class = if x * cs + y * sn > split_offset {
                    PAVED
                } else {
                    NATURAL
                };
                [x, y, 0.0]
            }
            STRUCTURE => {
                let along = rng.gen_range(-5.0..5.0);
                let z = rng.gen_range(0.0..3.0);
                match wall_side {
                    0 => [5.2, along, z],
                    1 => [-5.2, along, z],
                    2 => [along, 5.2, z],
                    _ => [along, -5.2, z],
                }
            }
            VEGETATION => {
                let (u, v): (f64, f64) = (rng.gen_range(0.0..TAU), rng.gen_range(-1.0..1.0));
                let s = (1.0 - v * v).sqrt();
                [tree[0] + s * u.cos(), tree[1] + s * u.sin(), tree[2] + v]
            }
            VEHICLE => {
                let q = box_surface(&mut rng, [0.0; 3], [2.0, 0.9, 0.75]);
                let (sy, cy) = car_yaw.sin_cos();
                [
                    car[0] + q[0] * cy - q[1] * sy,
                    car[1] + q[0] * sy + q[1] * cy,
                    car[2] + q[2],
                ]
            }
            OBSTACLE => {
                let c = obstacles[rng.gen_range(0..obstacles.len())];
                box_surface(&mut rng, c, [0.2, 0.2, 0.4])
            }
            HUMAN => {
                let a = rng.gen_range(0.0..TAU);
                [
                    person[0] + 0.25 * a.cos(),
                    person[1] + 0.25 * a.sin(),
                    rng.gen_range(0.0..1.8),
                ]
            }
            _ => unreachable!("class index below NUM_CLASSES"),
        };
        let jitter = |rng: &mut ChaCha8Rng| noise * (rng.gen::<f64>() * 2.0 - 1.0) * 3f64.sqrt();
        coords.push([
            (p[0] + jitter(&mut rng)) as f32,
            (p[1] + jitter(&mut rng)) as f32,
            (p[2] + jitter(&mut rng)) as f32,
        ]);
        intensity.push(band(class, platform, cfg, &mut rng));
        labels.push(class);
    }
    PointScan::new(coords, intensity, Some(labels), condition)
}

/// `scans_per_platform` scenes for every platform, interleaved by platform.
pub fn synthetic_dataset(cfg: &SyntheticConfig, seed: u64) -> Result<Vec<PointScan>> {
    let mut out = Vec::with_capacity(cfg.scans_per_platform * cfg.conditions.len());
    for k in 0..cfg.scans_per_platform {
        for p in 0..cfg.conditions.len() {
            let s = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((k * cfg.conditions.len() + p) as u64);
            out.push(synthetic_scan(cfg, p, s)?);
        }
    }
    Ok(out)
}

/// Writes scans, raw label files, a manifest and a direct taxonomy under
/// `dir`. Raw ids carry an instance number in the upper 16 bits; a seeded
/// `unlabeled_fraction` of points gets an id outside the taxonomy.
pub fn write_dataset(
    dir: &Path,
    name: &str,
    split: Split,
    scans: &[PointScan],
    unlabeled_fraction: f64,
    seed: u64,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(scans.len());
    for (i, scan) in scans.iter().enumerate() {
        let stem = format!("{name}_{i:03}_{}", scan.condition());
        let scan_path = PathBuf::from(format!("{stem}.bin"));
        let label_path = PathBuf::from(format!("{stem}.label"));
        write_scan(dir.join(&scan_path), scan, 1.0)?;
        let labels = scan.labels().ok_or(Error::MissingLabels)?;
        let raw: Vec<u32> = labels
            .iter()
            .map(|&c| {
                let id = if rng.gen::<f64>() < unlabeled_fraction {
                    UNLABELED_RAW_ID
                } else {
                    c as u32
                };
                ((i as u32 + 1) << 16) | id
            })
            .collect();
        write_raw_labels(dir.join(&label_path), &raw)?;
        entries.push(ManifestEntry {
            scan_path,
            label_path: Some(label_path),
            condition: scan.condition().clone(),
        });
    }
    let manifest = DatasetManifest::new(split, entries)?;
    let path = dir.join(format!("{name}.txt"));
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    let tax = dir.join("taxonomy.toml");
    fs::write(&tax, ClassTaxonomy::direct().to_toml()).map_err(|e| Error::io(&tax, e))?;
    Ok(path)
}

/// Small backbone and short-horizon learning rates sized for the synthetic
/// scenes: 500-point scans, a few hundred optimizer steps.
pub fn synthetic_model_config() -> ModelConfig {
    ModelConfig {
        stage_channels: vec![32, 64],
        stage_depths: vec![1, 1],
        ..ModelConfig::default()
    }
}

pub fn synthetic_train_settings() -> TrainSettings {
    let mut s = TrainSettings {
        epochs: 50,
        batch_size: 1,
        ..TrainSettings::default()
    };
    s.optim.backbone_lr = 5e-3;
    s.optim.head_lr = 2e-2;
    s
}

/// Run configuration for a directory written by [`write_dataset`] with
/// `train` and `val` manifests. Paths are relative to that directory.
pub fn synthetic_run_config() -> RunConfig {
    RunConfig {
        precision: Precision::F32,
        train_manifest: Some("train.txt".into()),
        val_manifest: Some("val.txt".into()),
        taxonomy: Some("taxonomy.toml".into()),
        output_dir: "run".into(),
        model: synthetic_model_config(),
        train: synthetic_train_settings(),
        ..RunConfig::default()
    }
}
