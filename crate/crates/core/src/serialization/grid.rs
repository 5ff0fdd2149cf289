use serde::{Deserialize, Serialize};

use crate::data::PointScan;
use crate::error::{Error, Result};
use crate::serialization::curve::{Curve, MAX_BITS_PER_AXIS};

pub const DEFAULT_BITS_PER_AXIS: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub bits_per_axis: u32,
}

impl GridSpec {
    pub fn new(origin: [f64; 3], voxel_size: f64, bits_per_axis: u32) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::Config(format!(
                "voxel_size must be positive, got {voxel_size}"
            )));
        }
        if bits_per_axis == 0 || bits_per_axis > MAX_BITS_PER_AXIS {
            return Err(Error::Config(format!(
                "bits_per_axis must be in 1..={MAX_BITS_PER_AXIS}, got {bits_per_axis}"
            )));
        }
        Ok(Self {
            origin,
            voxel_size,
            bits_per_axis,
        })
    }

    /// Grid anchored half a voxel below the scan's minimum corner.
    pub fn for_points(coords: &[[f32; 3]], voxel_size: f64, bits_per_axis: u32) -> Result<Self> {
        let mut min = [f64::INFINITY; 3];
        for p in coords {
            for a in 0..3 {
                min[a] = min[a].min(f64::from(p[a]));
            }
        }
        if coords.is_empty() {
            min = [0.0; 3];
        }
        let origin = min.map(|m| m - 0.5 * voxel_size);
        Self::new(origin, voxel_size, bits_per_axis)
    }
}

/// `v = floor((p - origin) / voxel_size)` per axis.
pub fn quantize(coords: &[[f32; 3]], grid: &GridSpec) -> Result<Vec<[u32; 3]>> {
    let limit = 1i64 << grid.bits_per_axis;
    coords
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut v = [0u32; 3];
            for a in 0..3 {
                let q = ((f64::from(p[a]) - grid.origin[a]) / grid.voxel_size).floor() as i64;
                if q < 0 || q >= limit {
                    return Err(Error::GridOverflow {
                        point: i,
                        axis: a,
                        value: q,
                        bits: grid.bits_per_axis,
                    });
                }
                v[a] = q as u32;
            }
            Ok(v)
        })
        .collect()
}

/// Curve codes plus the stable permutation that sorts them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SerializedOrder {
    pub codes: Vec<u64>,
    pub permutation: Vec<usize>,
    pub curve: Curve,
    pub bits_per_axis: u32,
}

impl SerializedOrder {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// `inverse[permutation[k]] == k`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.permutation.len()];
        for (k, &i) in self.permutation.iter().enumerate() {
            inv[i] = k;
        }
        inv
    }
}

pub fn serialize_voxels(voxels: &[[u32; 3]], curve: Curve, bits: u32) -> Result<SerializedOrder> {
    let codes = voxels
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            curve.encode(v, bits).map_err(|e| match e {
                Error::GridOverflow {
                    axis, value, bits, ..
                } => Error::GridOverflow {
                    point: i,
                    axis,
                    value,
                    bits,
                },
                other => other,
            })
        })
        .collect::<Result<Vec<u64>>>()?;
    let mut permutation: Vec<usize> = (0..codes.len()).collect();
    // sort_by_key is stable: ties keep original index order
    permutation.sort_by_key(|&i| codes[i]);
    Ok(SerializedOrder {
        codes,
        permutation,
        curve,
        bits_per_axis: bits,
    })
}

pub fn serialize(scan: &PointScan, grid: &GridSpec, curve: Curve) -> Result<SerializedOrder> {
    let voxels = quantize(scan.coords(), grid)?;
    serialize_voxels(&voxels, curve, grid.bits_per_axis)
}

/// Fine point → coarse cell assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolMap {
    pub cell_of: Vec<usize>,
    pub num_cells: usize,
    /// Coarse voxel coordinates per cell, in cell order.
    pub cell_voxels: Vec<[u32; 3]>,
}

impl PoolMap {
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_cells];
        for &k in &self.cell_of {
            c[k] += 1;
        }
        c
    }
}

/// Groups points into cells `voxel >> log2(stride)`, numbered densely in curve
/// order of the coarse codes.
pub fn grid_pool_map(order: &SerializedOrder, voxels: &[[u32; 3]], stride: u32) -> Result<PoolMap> {
    if stride < 2 || !stride.is_power_of_two() {
        return Err(Error::Config(format!(
            "pool stride must be a power of two >= 2, got {stride}"
        )));
    }
    if voxels.len() != order.len() {
        return Err(Error::shape(
            "grid_pool_map",
            format!("{} voxels for an order of {}", voxels.len(), order.len()),
        ));
    }
    let shift = stride.trailing_zeros();
    let coarse: Vec<[u32; 3]> = voxels.iter().map(|v| v.map(|c| c >> shift)).collect();
    let codes = coarse
        .iter()
        .map(|&v| order.curve.encode(v, order.bits_per_axis))
        .collect::<Result<Vec<u64>>>()?;
    let mut unique: Vec<(u64, usize)> = order.permutation.iter().map(|&i| (codes[i], i)).collect();
    unique.sort_by_key(|&(c, _)| c);
    unique.dedup_by_key(|&mut (c, _)| c);
    let cell_voxels = unique.iter().map(|&(_, i)| coarse[i]).collect();
    let cell_of = codes
        .iter()
        .map(|c| unique.binary_search_by_key(c, |&(u, _)| u).unwrap())
        .collect();
    Ok(PoolMap {
        cell_of,
        num_cells: unique.len(),
        cell_voxels,
    })
}

/// One representative point per occupied voxel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelSample {
    /// Representative point indices in curve order.
    pub representatives: Vec<usize>,
    /// For every input point, the position of its voxel in `representatives`.
    pub point_to_sample: Vec<usize>,
}

/// Keeps the first point of each voxel in curve order.
pub fn voxel_sample(order: &SerializedOrder) -> VoxelSample {
    let mut representatives = Vec::new();
    let mut point_to_sample = vec![0; order.len()];
    let mut last: Option<u64> = None;
    for &i in &order.permutation {
        let c = order.codes[i];
        if last != Some(c) {
            representatives.push(i);
            last = Some(c);
        }
        point_to_sample[i] = representatives.len() - 1;
    }
    VoxelSample {
        representatives,
        point_to_sample,
    }
}
