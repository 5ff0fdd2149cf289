//! Space-filling curve codes for 3-D voxel coordinates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_BITS_PER_AXIS: u32 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Curve {
    Morton,
    #[default]
    Hilbert,
}

impl Curve {
    pub fn encode(self, v: [u32; 3], bits: u32) -> Result<u64> {
        match self {
            Curve::Morton => morton_encode(v, bits),
            Curve::Hilbert => hilbert_encode(v, bits),
        }
    }

    pub fn decode(self, code: u64, bits: u32) -> [u32; 3] {
        match self {
            Curve::Morton => morton_decode(code, bits),
            Curve::Hilbert => hilbert_decode(code, bits),
        }
    }
}

impl fmt::Display for Curve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Curve::Morton => "morton",
            Curve::Hilbert => "hilbert",
        })
    }
}

impl FromStr for Curve {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "morton" | "z-order" => Ok(Curve::Morton),
            "hilbert" => Ok(Curve::Hilbert),
            _ => Err(Error::Config(format!("unknown curve {s:?}"))),
        }
    }
}

fn check(v: [u32; 3], bits: u32) -> Result<()> {
    if bits == 0 || bits > MAX_BITS_PER_AXIS {
        return Err(Error::Config(format!(
            "bits_per_axis must be in 1..={MAX_BITS_PER_AXIS}, got {bits}"
        )));
    }
    for (axis, &c) in v.iter().enumerate() {
        if u64::from(c) >> bits != 0 {
            return Err(Error::GridOverflow {
                point: 0,
                axis,
                value: i64::from(c),
                bits,
            });
        }
    }
    Ok(())
}

/// Spreads the low 21 bits of `x` so bit k lands at bit 3k.
#[inline]
fn spread3(x: u32) -> u64 {
    let mut x = u64::from(x) & 0x1f_ffff;
    x = (x | x << 32) & 0x001f_0000_0000_ffff;
    x = (x | x << 16) & 0x001f_0000_ff00_00ff;
    x = (x | x << 8) & 0x100f_00f0_0f00_f00f;
    x = (x | x << 4) & 0x10c3_0c30_c30c_30c3;
    x = (x | x << 2) & 0x1249_2492_4924_9249;
    x
}

#[inline]
fn compact3(mut x: u64) -> u32 {
    x &= 0x1249_2492_4924_9249;
    x = (x ^ (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x ^ (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x ^ (x >> 8)) & 0x001f_0000_ff00_00ff;
    x = (x ^ (x >> 16)) & 0x001f_0000_0000_ffff;
    x = (x ^ (x >> 32)) & 0x1f_ffff;
    x as u32
}

/// Bit interleave with x least significant: code bit 3k = x_k, 3k+1 = y_k, 3k+2 = z_k.
pub fn morton_encode(v: [u32; 3], bits: u32) -> Result<u64> {
    check(v, bits)?;
    Ok(spread3(v[0]) | spread3(v[1]) << 1 | spread3(v[2]) << 2)
}

pub fn morton_decode(code: u64, _bits: u32) -> [u32; 3] {
    [compact3(code), compact3(code >> 1), compact3(code >> 2)]
}

// Skilling's transpose construction ("Programming the Hilbert curve", 2004).
fn axes_to_transpose(x: &mut [u32; 3], bits: u32) {
    let m = 1u32 << (bits - 1);
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }
    for i in 1..3 {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    q = m;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for xi in x.iter_mut() {
        *xi ^= t;
    }
}

fn transpose_to_axes(x: &mut [u32; 3], bits: u32) {
    let n = 2u32 << (bits - 1);
    let t = x[2] >> 1;
    for i in (1..3).rev() {
        x[i] ^= x[i - 1];
    }
    x[0] ^= t;
    let mut q = 2;
    while q != n {
        let p = q - 1;
        for i in (0..3).rev() {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q <<= 1;
    }
}

/// 3-D Hilbert index, most significant bits first.
pub fn hilbert_encode(v: [u32; 3], bits: u32) -> Result<u64> {
    check(v, bits)?;
    let mut x = v;
    axes_to_transpose(&mut x, bits);
    let mut code = 0u64;
    for j in (0..bits).rev() {
        for xi in &x {
            code = code << 1 | u64::from((xi >> j) & 1);
        }
    }
    Ok(code)
}

pub fn hilbert_decode(code: u64, bits: u32) -> [u32; 3] {
    let mut x = [0u32; 3];
    let mut shift = 3 * bits;
    for j in (0..bits).rev() {
        for xi in x.iter_mut() {
            shift -= 1;
            *xi |= (((code >> shift) & 1) as u32) << j;
        }
    }
    transpose_to_axes(&mut x, bits);
    x
}
