//! Patch-local scaled dot-product attention kernels.
//!
//! Layout is `[n, heads, dim]` row-major. Saved probabilities are stored
//! patch by patch, head by head, as `len x len` blocks.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) fn check_partition(offsets: &[usize], n: usize) -> Result<()> {
    let err = |detail: String| Error::Partition { len: n, detail };
    match (offsets.first(), offsets.last()) {
        (Some(0), Some(&last)) if last == n => {}
        _ => {
            return Err(err(format!(
                "offsets must run from 0 to {n}, got {offsets:?}"
            )))
        }
    }
    if n > 0 && offsets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(err(format!(
            "offsets must be strictly increasing: {offsets:?}"
        )));
    }
    Ok(())
}

/// Offsets splitting `n` points into runs of `patch_size`; the last run may be short.
pub fn patch_offsets(n: usize, patch_size: usize) -> Vec<usize> {
    let size = patch_size.max(1);
    let mut out: Vec<usize> = (0..n).step_by(size).collect();
    out.push(n);
    out
}

pub(crate) fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    heads: usize,
    dim: usize,
    offsets: &[usize],
) -> (Vec<T>, Vec<T>) {
    let scale = T::one() / T::lit(dim as f64).sqrt();
    let stride = heads * dim;
    let mut out = vec![T::zero(); q.len()];
    let saved: usize = offsets
        .windows(2)
        .map(|w| (w[1] - w[0]).pow(2) * heads)
        .sum();
    let mut probs = Vec::with_capacity(saved);
    let mut row = Vec::new();
    for w in offsets.windows(2) {
        let (s, e) = (w[0], w[1]);
        for h in 0..heads {
            for i in s..e {
                let qi = &q[i * stride + h * dim..i * stride + (h + 1) * dim];
                row.clear();
                for j in s..e {
                    let kj = &k[j * stride + h * dim..j * stride + (h + 1) * dim];
                    row.push(dot(qi, kj) * scale);
                }
                crate::autodiff::tape::softmax_in_place(&mut row);
                let oi = i * stride + h * dim;
                for (jj, &p) in row.iter().enumerate() {
                    let vj = (s + jj) * stride + h * dim;
                    for t in 0..dim {
                        out[oi + t] = out[oi + t] + p * v[vj + t];
                    }
                }
                probs.extend_from_slice(&row);
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    grad_out: &[T],
    heads: usize,
    dim: usize,
    offsets: &[usize],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let scale = T::one() / T::lit(dim as f64).sqrt();
    let stride = heads * dim;
    let mut gq = vec![T::zero(); q.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gv = vec![T::zero(); v.len()];
    let mut base = 0;
    let mut dp = Vec::new();
    for w in offsets.windows(2) {
        let (s, e) = (w[0], w[1]);
        let len = e - s;
        for h in 0..heads {
            for i in s..e {
                let p = &probs[base + (i - s) * len..base + (i - s + 1) * len];
                let go = &grad_out[i * stride + h * dim..i * stride + (h + 1) * dim];
                dp.clear();
                for j in s..e {
                    let vj = j * stride + h * dim;
                    dp.push(dot(go, &v[vj..vj + dim]));
                    let pij = p[j - s];
                    for t in 0..dim {
                        gv[vj + t] = gv[vj + t] + pij * go[t];
                    }
                }
                let weighted: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                let qi = i * stride + h * dim;
                for j in s..e {
                    let ds = p[j - s] * (dp[j - s] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = j * stride + h * dim;
                    for t in 0..dim {
                        gq[qi + t] = gq[qi + t] + ds * k[kj + t];
                        gk[kj + t] = gk[kj + t] + ds * q[qi + t];
                    }
                }
            }
            base += len * len;
        }
    }
    (gq, gk, gv)
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
