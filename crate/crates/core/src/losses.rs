//! Cross-entropy and Lovász-Softmax segmentation losses.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::DEFAULT_IGNORE_INDEX;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub ce_weight: f64,
    pub lovasz_weight: f64,
    pub ignore_index: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ce_weight: 1.0,
            lovasz_weight: 1.0,
            ignore_index: DEFAULT_IGNORE_INDEX,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ce_weight >= 0.0 && self.lovasz_weight >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got ce {} lovasz {}",
                self.ce_weight, self.lovasz_weight
            )));
        }
        Ok(())
    }
}

/// A scalar loss node. `all_ignored` is set when no point carried a usable
/// label, in which case the value is a constant zero.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub var: Var,
    pub all_ignored: bool,
}

fn check_labels(
    op: &'static str,
    labels: &[usize],
    rows: usize,
    classes: usize,
    ignore: usize,
) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(
            op,
            format!("{} labels for {rows} rows", labels.len()),
        ));
    }
    if let Some((i, &l)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l >= classes && l != ignore)
    {
        return Err(Error::shape(
            op,
            format!("label {l} at point {i} outside 0..{classes}"),
        ));
    }
    Ok(())
}

fn logits_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, v: Var) -> Result<(usize, usize)> {
    match tape.shape(v) {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected [N, C], got {s:?}"))),
    }
}

/// Mean negative log-likelihood over non-ignored points.
pub fn cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    ignore_index: usize,
) -> Result<LossTerm> {
    let (n, c) = logits_shape(tape, "cross_entropy", logits)?;
    check_labels("cross_entropy", labels, n, c, ignore_index)?;
    let keep: Vec<usize> = (0..n).filter(|&i| labels[i] != ignore_index).collect();
    if keep.is_empty() {
        let var = tape.constant(Tensor::scalar(T::zero()));
        return Ok(LossTerm {
            var,
            all_ignored: true,
        });
    }
    let targets: Vec<usize> = keep.iter().map(|&i| labels[i]).collect();
    let rows = if keep.len() == n {
        logits
    } else {
        tape.gather(logits, &keep)?
    };
    let logp = tape.log_softmax(rows)?;
    let picked = tape.pick_per_row(logp, &targets)?;
    let mean = tape.mean(picked);
    Ok(LossTerm {
        var: tape.scale(mean, -T::one()),
        all_ignored: false,
    })
}

/// Lovász-Softmax value and its gradient with respect to `probs` (row-major
/// `[n, classes]`), averaged over classes present among non-ignored labels.
/// Returns `None` when every point is ignored.
pub fn lovasz_softmax_parts<T: Scalar>(
    probs: &[T],
    classes: usize,
    labels: &[usize],
    ignore_index: usize,
) -> Option<(T, Vec<T>)> {
    let valid: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] != ignore_index)
        .collect();
    if valid.is_empty() {
        return None;
    }
    let mut grad = vec![T::zero(); probs.len()];
    let mut total = T::zero();
    let mut present = 0usize;
    let mut order: Vec<usize> = Vec::with_capacity(valid.len());
    let mut errors: Vec<T> = vec![T::zero(); labels.len()];
    for cls in 0..classes {
        let gts = valid.iter().filter(|&&i| labels[i] == cls).count();
        if gts == 0 {
            continue;
        }
        present += 1;
        for &i in &valid {
            let fg = if labels[i] == cls {
                T::one()
            } else {
                T::zero()
            };
            errors[i] = (fg - probs[i * classes + cls]).abs();
        }
        order.clear();
        order.extend_from_slice(&valid);
        // descending error, ties by point index
        order.sort_by(|&a, &b| {
            errors[b]
                .partial_cmp(&errors[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        let gts_t = T::lit(gts as f64);
        let mut cum_fg = T::zero();
        let mut cum_bg = T::zero();
        let mut prev_jaccard = T::zero();
        for &i in &order {
            let is_fg = labels[i] == cls;
            if is_fg {
                cum_fg = cum_fg + T::one();
            } else {
                cum_bg = cum_bg + T::one();
            }
            let jaccard = T::one() - (gts_t - cum_fg) / (gts_t + cum_bg);
            let step = jaccard - prev_jaccard;
            prev_jaccard = jaccard;
            total = total + errors[i] * step;
            // d|fg - p| / dp = -sign(fg - p), zero at the kink
            let fg = if is_fg { T::one() } else { T::zero() };
            let diff = fg - probs[i * classes + cls];
            let sign = if diff > T::zero() {
                T::one()
            } else if diff < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            grad[i * classes + cls] = -sign * step;
        }
    }
    let inv = T::one() / T::lit(present as f64);
    grad.iter_mut().for_each(|g| *g = *g * inv);
    Some((total * inv, grad))
}

/// Lovász-Softmax value without building a tape.
pub fn lovasz_softmax_value<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    ignore_index: usize,
) -> Result<Option<T>> {
    let (n, c) = match probs.shape() {
        [r, c] => (*r, *c),
        s => {
            return Err(Error::shape(
                "lovasz_softmax",
                format!("expected [N, C], got {s:?}"),
            ))
        }
    };
    check_labels("lovasz_softmax", labels, n, c, ignore_index)?;
    Ok(lovasz_softmax_parts(probs.values(), c, labels, ignore_index).map(|(v, _)| v))
}

/// Lovász-Softmax on class probabilities. The sort order is fixed during
/// backward, so the gradient is that of the active linear piece.
pub fn lovasz_softmax<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    labels: &[usize],
    ignore_index: usize,
) -> Result<LossTerm> {
    let (n, c) = logits_shape(tape, "lovasz_softmax", probs)?;
    check_labels("lovasz_softmax", labels, n, c, ignore_index)?;
    match lovasz_softmax_parts(tape.value(probs), c, labels, ignore_index) {
        Some((value, grad)) => Ok(LossTerm {
            var: tape.linearized(probs, value, grad)?,
            all_ignored: false,
        }),
        None => Ok(LossTerm {
            var: tape.constant(Tensor::scalar(T::zero())),
            all_ignored: true,
        }),
    }
}

/// `ce_weight * CE(logits) + lovasz_weight * Lovasz(softmax(logits))`.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossTerm> {
    cfg.validate()?;
    let mut terms = Vec::with_capacity(2);
    let mut all_ignored = false;
    if cfg.ce_weight > 0.0 {
        let ce = cross_entropy(tape, logits, labels, cfg.ignore_index)?;
        all_ignored |= ce.all_ignored;
        terms.push(if cfg.ce_weight == 1.0 {
            ce.var
        } else {
            tape.scale(ce.var, T::lit(cfg.ce_weight))
        });
    }
    if cfg.lovasz_weight > 0.0 {
        let probs = tape.softmax(logits, 1)?;
        let lv = lovasz_softmax(tape, probs, labels, cfg.ignore_index)?;
        all_ignored |= lv.all_ignored;
        terms.push(if cfg.lovasz_weight == 1.0 {
            lv.var
        } else {
            tape.scale(lv.var, T::lit(cfg.lovasz_weight))
        });
    }
    let var = match terms.as_slice() {
        [] => tape.constant(Tensor::scalar(T::zero())),
        [single] => *single,
        [first, rest @ ..] => {
            let mut acc = *first;
            for &t in rest {
                acc = tape.add(acc, t)?;
            }
            acc
        }
    };
    Ok(LossTerm { var, all_ignored })
}
