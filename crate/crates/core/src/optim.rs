//! AdamW with decoupled weight decay and a two-phase cosine OneCycle schedule.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{is_head_param, is_no_decay_param, ParamGrads, ParamStore};
use crate::scalar::Scalar;

/// Shape of the OneCycle schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OneCycle {
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        Self {
            pct_start: 0.1,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }
}

impl OneCycle {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pct_start)
            || !(self.div_factor > 0.0 && self.final_div_factor > 0.0)
        {
            return Err(Error::Config(format!(
                "invalid schedule: pct_start {} div_factor {} final_div_factor {}",
                self.pct_start, self.div_factor, self.final_div_factor
            )));
        }
        Ok(())
    }
}

fn cosine(from: f64, to: f64, pct: f64) -> f64 {
    to + (from - to) * (1.0 + (PI * pct).cos()) / 2.0
}

/// Learning rate at `step` of `total`. Warmup runs from `max_lr / div_factor`
/// up to `max_lr` at `step = pct_start * total`, then anneals down to
/// `max_lr / final_div_factor` at `step = total`.
pub fn onecycle_lr(step: usize, total: usize, max_lr: f64, shape: &OneCycle) -> Result<f64> {
    if step > total {
        return Err(Error::ScheduleExhausted { step, total });
    }
    let initial = max_lr / shape.div_factor;
    let last = max_lr / shape.final_div_factor;
    let peak = shape.pct_start * total as f64;
    let s = step as f64;
    Ok(if s <= peak && peak > 0.0 {
        cosine(initial, max_lr, s / peak)
    } else if total as f64 > peak {
        cosine(max_lr, last, (s - peak) / (total as f64 - peak))
    } else {
        max_lr
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Encoder, decoder and normalization affines.
    Backbone,
    /// Segmentation heads, projection and logit scale.
    Heads,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if is_head_param(name) {
            ParamGroup::Heads
        } else {
            ParamGroup::Backbone
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Heads => "heads",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub backbone_lr: f64,
    pub head_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: OneCycle,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            backbone_lr: 5e-5,
            head_lr: 8e-4,
            weight_decay: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: OneCycle::default(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.backbone_lr > 0.0
            && self.head_lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )));
        }
        self.schedule.validate()
    }

    pub fn max_lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.backbone_lr,
            ParamGroup::Heads => self.head_lr,
        }
    }

    pub fn lr_at(&self, group: ParamGroup, step: usize, total: usize) -> Result<f64> {
        onecycle_lr(step, total, self.max_lr(group), &self.schedule)
    }
}

/// First and second moments plus the step count of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }
}

/// One AdamW update of `theta` in place.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    lr: T,
    weight_decay: T,
    beta1: T,
    beta2: T,
    eps: T,
) {
    state.t += 1;
    let one = T::one();
    let c1 = one - beta1.powi(state.t as i32);
    let c2 = one - beta2.powi(state.t as i32);
    for (((p, &g), m), v) in theta
        .iter_mut()
        .zip(grad)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = beta1 * *m + (one - beta1) * g;
        *v = beta2 * *v + (one - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *p);
    }
}

/// AdamW over a whole [`ParamStore`] with per-group OneCycle rates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: OptimConfig,
    pub states: Vec<AdamState<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: OptimConfig, params: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            states: params
                .iter()
                .map(|(_, t)| AdamState::new(t.numel()))
                .collect(),
        })
    }

    /// Applies one step at schedule position `step` of `total`. Parameters
    /// without a gradient (never touched by the forward pass) are left alone,
    /// state included. Nothing is updated if any gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &ParamGrads<T>,
        step: usize,
        total: usize,
    ) -> Result<()> {
        if grads.len() != params.len() || self.states.len() != params.len() {
            return Err(Error::shape(
                "adamw_step",
                format!(
                    "{} params, {} grads, {} states",
                    params.len(),
                    grads.len(),
                    self.states.len()
                ),
            ));
        }
        for i in 0..params.len() {
            if let Some(g) = grads.get(i) {
                if g.len() != params.tensor(i).numel() {
                    return Err(Error::shape(
                        "adamw_step",
                        format!("gradient length for {}", params.name(i)),
                    ));
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(params.name(i).to_string()));
                }
            }
        }
        let backbone = T::lit(self.config.lr_at(ParamGroup::Backbone, step, total)?);
        let heads = T::lit(self.config.lr_at(ParamGroup::Heads, step, total)?);
        let c = &self.config;
        let (b1, b2, eps) = (T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps));
        for i in 0..params.len() {
            let Some(g) = grads.get(i) else { continue };
            let name = params.name(i);
            let lr = match ParamGroup::of(name) {
                ParamGroup::Backbone => backbone,
                ParamGroup::Heads => heads,
            };
            let wd = if is_no_decay_param(name) {
                T::zero()
            } else {
                T::lit(c.weight_decay)
            };
            adamw_update(
                params.tensor_mut(i).values_mut(),
                g,
                &mut self.states[i],
                lr,
                wd,
                b1,
                b2,
                eps,
            );
        }
        Ok(())
    }
}
