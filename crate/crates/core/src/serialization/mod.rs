//! Voxel quantization, space-filling-curve ordering and grid pooling.

pub mod curve;
pub mod grid;

pub use curve::{
    hilbert_decode, hilbert_encode, morton_decode, morton_encode, Curve, MAX_BITS_PER_AXIS,
};
pub use grid::{
    grid_pool_map, quantize, serialize, serialize_voxels, voxel_sample, GridSpec, PoolMap,
    SerializedOrder, VoxelSample, DEFAULT_BITS_PER_AXIS,
};
