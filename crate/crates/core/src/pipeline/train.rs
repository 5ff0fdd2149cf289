use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ConditionTag, PointScan};
use crate::error::{Error, Result};
use crate::network::{ParamGrads, PreparedScan, SegModel};
use crate::optim::{AdamW, ParamGroup};
use crate::pipeline::config::{AugmentConfig, TrainSettings};
use crate::pipeline::eval::{evaluate_model, EvalReport};
use crate::scalar::Scalar;

/// Batches of scan indices for one epoch. Homogeneous batches hold one
/// condition each and conditions take turns; mixed batches are plain chunks
/// of a shuffled order. Depends only on `(seed, epoch)`.
pub fn build_batches(
    conditions: &[ConditionTag],
    batch_size: usize,
    mixed: bool,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    if mixed {
        let mut order: Vec<usize> = (0..conditions.len()).collect();
        order.shuffle(&mut rng);
        return order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    }
    let mut groups: Vec<(&ConditionTag, Vec<usize>)> = Vec::new();
    for (i, c) in conditions.iter().enumerate() {
        match groups.iter_mut().find(|(g, _)| *g == c) {
            Some((_, v)) => v.push(i),
            None => groups.push((c, vec![i])),
        }
    }
    let mut queues: Vec<Vec<Vec<usize>>> = groups
        .into_iter()
        .map(|(_, mut idx)| {
            idx.shuffle(&mut rng);
            idx.chunks(batch_size)
                .rev()
                .map(<[usize]>::to_vec)
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    while queues.iter().any(|q| !q.is_empty()) {
        for q in &mut queues {
            if let Some(b) = q.pop() {
                out.push(b);
            }
        }
    }
    out
}

pub fn batches_per_epoch(conditions: &[ConditionTag], batch_size: usize, mixed: bool) -> usize {
    build_batches(conditions, batch_size, mixed, 0, 0).len()
}

/// Random subset of at most `max_points` points, in original order.
pub fn subsample(scan: &PointScan, max_points: usize, rng: &mut ChaCha8Rng) -> Result<PointScan> {
    if scan.len() <= max_points {
        return Ok(scan.clone());
    }
    let mut idx = rand::seq::index::sample(rng, scan.len(), max_points).into_vec();
    idx.sort_unstable();
    scan.select(&idx)
}

fn augment(scan: PointScan, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<PointScan> {
    if !cfg.rotate_z && !cfg.flip_x && cfg.jitter == 0.0 {
        return Ok(scan);
    }
    let (s, c) = if cfg.rotate_z {
        rng.gen_range(0.0..TAU).sin_cos()
    } else {
        (0.0, 1.0)
    };
    let flip = if cfg.flip_x && rng.gen::<bool>() {
        -1.0
    } else {
        1.0
    };
    let coords = scan
        .coords()
        .iter()
        .map(|p| {
            let (x, y, z) = (f64::from(p[0]) * flip, f64::from(p[1]), f64::from(p[2]));
            let mut j = || {
                if cfg.jitter > 0.0 {
                    rng.gen_range(-cfg.jitter..cfg.jitter)
                } else {
                    0.0
                }
            };
            [
                (x * c - y * s + j()) as f32,
                (x * s + y * c + j()) as f32,
                (z + j()) as f32,
            ]
        })
        .collect();
    PointScan::new(
        coords,
        scan.intensity().to_vec(),
        scan.labels().map(<[usize]>::to_vec),
        scan.condition().clone(),
    )
}

/// One training example after subsampling and voxel sampling.
struct Sample<T: Scalar> {
    prep: PreparedScan<T>,
    labels: Vec<usize>,
    condition: ConditionTag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    /// Mean loss over the epoch's labelled scans.
    pub train_loss: f64,
    /// Per-condition validation mIoU, in first-seen order.
    pub val_miou: Vec<(ConditionTag, f64)>,
}

impl EpochRecord {
    /// One log line; floats use shortest round-trip formatting.
    pub fn log_line(&self) -> String {
        let mut s = format!(
            "epoch={} step={} train_loss={}",
            self.epoch, self.step, self.train_loss
        );
        for (c, m) in &self.val_miou {
            s += &format!(" val_miou.{c}={m}");
        }
        s
    }
}

/// Model, optimizer and schedule position.
pub struct Trainer<T: Scalar> {
    pub model: SegModel<T>,
    pub optimizer: AdamW<T>,
    pub settings: TrainSettings,
    pub step: usize,
    pub total_steps: usize,
    pub epoch: usize,
    cache: Vec<Option<std::rc::Rc<Sample<T>>>>,
}

impl<T: Scalar> Trainer<T> {
    /// Schedule length is `epochs * batches_per_epoch` unless overridden.
    pub fn new(model: SegModel<T>, settings: TrainSettings, train: &[PointScan]) -> Result<Self> {
        settings.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyDataset("no training scans".into()));
        }
        for s in train {
            model
                .config()
                .resolve_condition(s.condition())
                .map_err(|_| {
                    Error::Config(format!(
                        "scan condition {} is not configured",
                        s.condition()
                    ))
                })?;
            if s.labels().is_none() {
                return Err(Error::MissingLabels);
            }
        }
        let conds: Vec<ConditionTag> = train.iter().map(|s| s.condition().clone()).collect();
        let total_steps = settings.total_steps.unwrap_or(
            settings.epochs
                * batches_per_epoch(&conds, settings.batch_size, settings.mixed_batches),
        );
        let optimizer = AdamW::new(settings.optim.clone(), model.params())?;
        Ok(Self {
            model,
            optimizer,
            settings,
            step: 0,
            total_steps,
            epoch: 0,
            cache: Vec::new(),
        })
    }

    pub fn lr(&self, group: ParamGroup) -> Result<f64> {
        self.settings
            .optim
            .lr_at(group, self.step.min(self.total_steps), self.total_steps)
    }

    fn sample(&mut self, scans: &[PointScan], i: usize) -> Result<std::rc::Rc<Sample<T>>> {
        if self.cache.len() != scans.len() {
            self.cache = vec![None; scans.len()];
        }
        if let Some(s) = &self.cache[i] {
            return Ok(s.clone());
        }
        let scan = &scans[i];
        let aug = &self.settings.augment;
        let random =
            scan.len() > self.settings.max_points || aug.rotate_z || aug.flip_x || aug.jitter > 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.settings.seed ^ ((self.epoch as u64) << 32) ^ (i as u64).wrapping_mul(0x9E37_79B9),
        );
        let sub = subsample(scan, self.settings.max_points, &mut rng)?;
        let sub = augment(sub, aug, &mut rng)?;
        let vs = self.model.voxel_sample(&sub)?;
        let reps = sub.select(&vs.representatives)?;
        let sample = std::rc::Rc::new(Sample {
            prep: self.model.prepare(&reps)?,
            labels: reps.labels().ok_or(Error::MissingLabels)?.to_vec(),
            condition: reps.condition().clone(),
        });
        if !random {
            self.cache[i] = Some(sample.clone());
        }
        Ok(sample)
    }

    /// One optimizer step on the mean loss of `batch`. Returns the summed
    /// loss and the number of scans that carried labels.
    fn train_batch(&mut self, scans: &[PointScan], batch: &[usize]) -> Result<(f64, usize)> {
        let mut grads = ParamGrads::zeros_like(self.model.params());
        let mut parts = Vec::with_capacity(batch.len());
        for &i in batch {
            let s = self.sample(scans, i)?;
            let (loss, g) =
                self.model
                    .loss_and_grads(&s.prep, &s.labels, &s.condition, &self.settings.loss)?;
            if let Some(l) = loss {
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch: self.epoch + 1,
                        step: self.step,
                    });
                }
                parts.push((l.to_f64().unwrap_or(f64::NAN), g));
            }
        }
        if parts.is_empty() {
            return Ok((0.0, 0));
        }
        let w = T::one() / T::lit(parts.len() as f64);
        let mut sum = 0.0;
        for (l, g) in &parts {
            grads.accumulate(g, w);
            sum += l;
        }
        if self.step >= self.total_steps {
            return Err(Error::ScheduleExhausted {
                step: self.step,
                total: self.total_steps,
            });
        }
        self.optimizer
            .step(self.model.params_mut(), &grads, self.step, self.total_steps)?;
        self.step += 1;
        Ok((sum, parts.len()))
    }

    /// Runs one epoch; `val` scans are evaluated afterwards when non-empty.
    pub fn train_epoch(&mut self, train: &[PointScan], val: &[PointScan]) -> Result<EpochRecord> {
        let conds: Vec<ConditionTag> = train.iter().map(|s| s.condition().clone()).collect();
        let batches = build_batches(
            &conds,
            self.settings.batch_size,
            self.settings.mixed_batches,
            self.settings.seed,
            self.epoch,
        );
        let (mut sum, mut count) = (0.0, 0);
        for batch in &batches {
            if self.step >= self.total_steps {
                break;
            }
            let (s, c) = self.train_batch(train, batch)?;
            sum += s;
            count += c;
        }
        self.epoch += 1;
        let val_miou = if val.is_empty() {
            Vec::new()
        } else {
            let report = evaluate_model(&self.model, val, self.settings.loss.ignore_index)?;
            report.per_platform_miou()
        };
        let record = EpochRecord {
            epoch: self.epoch,
            step: self.step,
            train_loss: if count == 0 {
                f64::NAN
            } else {
                sum / count as f64
            },
            val_miou,
        };
        log::info!("{}", record.log_line());
        Ok(record)
    }

    /// Trains for the configured number of epochs, calling `after_epoch` after
    /// each one (e.g. to checkpoint).
    pub fn run(
        &mut self,
        train: &[PointScan],
        val: &[PointScan],
        mut after_epoch: impl FnMut(&Self, &EpochRecord) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let mut log = Vec::with_capacity(self.settings.epochs);
        while self.epoch < self.settings.epochs && self.step < self.total_steps {
            let rec = self.train_epoch(train, val)?;
            after_epoch(self, &rec)?;
            log.push(rec);
        }
        Ok(log)
    }

    pub fn evaluate(&self, scans: &[PointScan]) -> Result<EvalReport> {
        evaluate_model(&self.model, scans, self.settings.loss.ignore_index)
    }
}
