//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure or budget overrun.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pptseg::autodiff::{grad_check, grad_check_multi, relative_error, Tape, Tensor, Var};
use pptseg::data::Split;
use pptseg::data::{ConditionTag, PointScan, NUM_CLASSES};
use pptseg::losses::{cross_entropy, lovasz_softmax, lovasz_softmax_value, LossConfig};
use pptseg::metrics::ConfusionMatrix;
use pptseg::network::{
    condition_of_param, prompted_norm, Alignment, EmbeddingTable, ModelConfig, SegModel,
};
use pptseg::optim::{adamw_update, onecycle_lr, AdamState, OneCycle};
use pptseg::pipeline::{
    checkpoint_from_bytes, evaluate_model, load_checkpoint, run_training, AnyCheckpoint, RunConfig,
    TrainSettings, Trainer, CHECKPOINT_FILE, METRICS_LOG_FILE,
};
use pptseg::serialization::{hilbert_decode, hilbert_encode, morton_decode, morton_encode};
use pptseg::synthetic::{
    synthetic_dataset, synthetic_model_config, synthetic_run_config, synthetic_train_settings,
    write_dataset, SyntheticConfig,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], positive: bool) -> Tensor<f64> {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let x: f64 = rng.gen_range(0.05..1.5);
            if positive || rng.gen_bool(0.5) {
                x
            } else {
                -x
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), values).unwrap()
}

/// Fixed random weighting so every output element reaches the scalar.
fn weigh(t: &mut Tape<f64>, x: Var, seed: u64) -> pptseg::Result<Var> {
    let shape = t.shape(x).to_vec();
    let w = t.constant(random_tensor(
        &mut ChaCha8Rng::seed_from_u64(seed),
        &shape,
        false,
    ));
    let y = t.mul(x, w)?;
    Ok(t.sum(y))
}

fn tag(s: &str) -> ConditionTag {
    ConditionTag::new(s).unwrap()
}

fn random_scan(n: usize, seed: u64, cond: &str) -> PointScan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = (0..n)
        .map(|_| {
            [
                rng.gen_range(0.0..2.0),
                rng.gen_range(0.0..2.0),
                rng.gen_range(0.0..1.0),
            ]
        })
        .collect();
    let intensity = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..NUM_CLASSES)).collect();
    PointScan::new(coords, intensity, Some(labels), tag(cond)).unwrap()
}

fn small_config(alignment: Alignment) -> ModelConfig {
    ModelConfig {
        stage_channels: vec![8, 16],
        stage_depths: vec![1, 1],
        heads: 2,
        patch_size: 8,
        voxel_size: 0.01,
        alignment,
        embed_dim: 16,
        ..ModelConfig::default()
    }
}

/// Worst relative error over `count` sampled parameter coordinates accepted
/// by `filter`; coordinates whose gradient is below 1e-7 on both sides are
/// skipped as central-difference noise. Returns (worst, coordinates compared).
fn param_check(
    model: &SegModel<f64>,
    scan: &PointScan,
    count: usize,
    seed: u64,
    filter: impl Fn(&str) -> bool,
) -> (f64, usize) {
    let prep = model.prepare(scan).unwrap();
    let labels = scan.labels().unwrap();
    let loss = LossConfig::default();
    let (_, grads) = model
        .loss_and_grads(&prep, labels, scan.condition(), &loss)
        .unwrap();
    let candidates: Vec<usize> = (0..model.params().len())
        .filter(|&i| filter(model.params().name(i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-6;
    let mut worst = 0.0f64;
    let mut compared = 0;
    for _ in 0..count {
        let i = *candidates.choose(&mut rng).unwrap();
        let j = rng.gen_range(0..model.params().tensor(i).numel());
        let analytic = grads.get(i).map_or(0.0, |g| g[j]);
        let eval = |d: f64| {
            let mut m = model.clone();
            m.params_mut().tensor_mut(i).values_mut()[j] += d;
            m.loss_and_grads(&prep, labels, scan.condition(), &loss)
                .unwrap()
                .0
                .unwrap()
        };
        let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
        if analytic.abs().max(numeric.abs()) > 1e-7 {
            worst = worst.max(relative_error(analytic, numeric));
            compared += 1;
        }
    }
    (worst, compared)
}

fn perturbed_model(alignment: Alignment, seed: u64) -> SegModel<f64> {
    let table = EmbeddingTable::random_unit(16, 3).unwrap();
    let mut model = SegModel::<f64>::new(small_config(alignment), seed, Some(table)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..model.params().len() {
        for v in model.params_mut().tensor_mut(i).values_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    model
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_tensor(&mut rng, &[4, 3], false);
    let b = random_tensor(&mut rng, &[4, 3], false);
    let c = random_tensor(&mut rng, &[3, 5], false);
    let p = random_tensor(&mut rng, &[4, 3], true);
    let s = random_tensor(&mut rng, &[1], false);
    let eps = 1e-6;
    let two = [a.clone(), b.clone()];
    let mut ops: Vec<(&str, f64)> = vec![
        (
            "add",
            grad_check_multi(
                |t, v| {
                    let y = t.add(v[0], v[1])?;
                    weigh(t, y, 1)
                },
                &two,
                eps,
            )
            .unwrap(),
        ),
        (
            "sub",
            grad_check_multi(
                |t, v| {
                    let y = t.sub(v[0], v[1])?;
                    weigh(t, y, 2)
                },
                &two,
                eps,
            )
            .unwrap(),
        ),
        (
            "mul",
            grad_check_multi(
                |t, v| {
                    let y = t.mul(v[0], v[1])?;
                    weigh(t, y, 3)
                },
                &two,
                eps,
            )
            .unwrap(),
        ),
        (
            "mul_broadcast",
            grad_check_multi(
                |t, v| {
                    let y = t.mul(v[1], v[0])?;
                    weigh(t, y, 4)
                },
                &[a.clone(), s.clone()],
                eps,
            )
            .unwrap(),
        ),
        (
            "add_scalar",
            grad_check(
                |t, v| {
                    let y = t.add_scalar(v, 0.3);
                    weigh(t, y, 5)
                },
                &a,
                eps,
            )
            .unwrap(),
        ),
        (
            "scale",
            grad_check(
                |t, v| {
                    let y = t.scale(v, -1.7);
                    weigh(t, y, 6)
                },
                &a,
                eps,
            )
            .unwrap(),
        ),
        (
            "matmul",
            grad_check_multi(
                |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    weigh(t, y, 7)
                },
                &[a.clone(), c.clone()],
                eps,
            )
            .unwrap(),
        ),
        (
            "transpose",
            grad_check(
                |t, v| {
                    let y = t.transpose(v)?;
                    weigh(t, y, 8)
                },
                &a,
                eps,
            )
            .unwrap(),
        ),
        (
            "exp",
            grad_check(
                |t, v| {
                    let y = t.exp(v);
                    weigh(t, y, 9)
                },
                &a,
                eps,
            )
            .unwrap(),
        ),
        (
            "log",
            grad_check(
                |t, v| {
                    let y = t.log(v);
                    weigh(t, y, 10)
                },
                &p,
                eps,
            )
            .unwrap(),
        ),
        (
            "relu",
            grad_check(
                |t, v| {
                    let y = t.relu(v);
                    weigh(t, y, 11)
                },
                &a,
                eps,
            )
            .unwrap(),
        ),
        (
            "powf",
            grad_check(
                |t, v| {
                    let y = t.powf(v, -0.5);
                    weigh(t, y, 12)
                },
                &p,
                eps,
            )
            .unwrap(),
        ),
        (
            "clamp_min",
            grad_check(
                |t, v| {
                    let y = t.clamp_min(v, 0.0);
                    weigh(t, y, 13)
                },
                &a,
                eps,
            )
            .unwrap(),
        ),
        (
            "sum",
            grad_check(
                |t, v| {
                    let y = t.sum(v);
                    weigh(t, y, 14)
                },
                &a,
                eps,
            )
            .unwrap(),
        ),
        (
            "mean",
            grad_check(
                |t, v| {
                    let y = t.mean(v);
                    weigh(t, y, 15)
                },
                &a,
                eps,
            )
            .unwrap(),
        ),
        (
            "sum_axis",
            grad_check(
                |t, v| {
                    let y = t.sum_axis(v, 0)?;
                    weigh(t, y, 16)
                },
                &a,
                eps,
            )
            .unwrap(),
        ),
        (
            "mean_axis",
            grad_check(
                |t, v| {
                    let y = t.mean_axis(v, 1)?;
                    weigh(t, y, 17)
                },
                &a,
                eps,
            )
            .unwrap(),
        ),
        (
            "expand_rows",
            grad_check(
                |t, v| {
                    let r = t.sum_axis(v, 0)?;
                    let y = t.expand_rows(r, 5)?;
                    weigh(t, y, 18)
                },
                &a,
                eps,
            )
            .unwrap(),
        ),
        (
            "expand_cols",
            grad_check(
                |t, v| {
                    let r = t.sum_axis(v, 1)?;
                    let y = t.expand_cols(r, 2)?;
                    weigh(t, y, 19)
                },
                &a,
                eps,
            )
            .unwrap(),
        ),
        (
            "gather",
            grad_check(
                |t, v| {
                    let y = t.gather(v, &[3, 0, 3, 1])?;
                    weigh(t, y, 20)
                },
                &a,
                eps,
            )
            .unwrap(),
        ),
        (
            "scatter_add",
            grad_check(
                |t, v| {
                    let y = t.scatter_add(v, &[1, 1, 0, 2], 3)?;
                    weigh(t, y, 21)
                },
                &a,
                eps,
            )
            .unwrap(),
        ),
        (
            "row_scale",
            grad_check(
                |t, v| {
                    let y = t.row_scale(v, &[0.5, -2.0, 1.0, 3.0])?;
                    weigh(t, y, 22)
                },
                &a,
                eps,
            )
            .unwrap(),
        ),
        (
            "slice_cols",
            grad_check(
                |t, v| {
                    let y = t.slice_cols(v, 1, 3)?;
                    weigh(t, y, 23)
                },
                &a,
                eps,
            )
            .unwrap(),
        ),
        (
            "concat",
            grad_check_multi(
                |t, v| {
                    let y = t.concat(&[v[0], v[1]], 1)?;
                    weigh(t, y, 24)
                },
                &two,
                eps,
            )
            .unwrap(),
        ),
        (
            "reshape",
            grad_check(
                |t, v| {
                    let y = t.reshape(v, &[2, 6])?;
                    weigh(t, y, 25)
                },
                &a,
                eps,
            )
            .unwrap(),
        ),
        (
            "softmax",
            grad_check(
                |t, v| {
                    let y = t.softmax(v, 1)?;
                    weigh(t, y, 26)
                },
                &a,
                eps,
            )
            .unwrap(),
        ),
        (
            "log_softmax",
            grad_check(
                |t, v| {
                    let y = t.log_softmax(v)?;
                    weigh(t, y, 27)
                },
                &a,
                eps,
            )
            .unwrap(),
        ),
        (
            "pick_per_row",
            grad_check(
                |t, v| {
                    let y = t.pick_per_row(v, &[2, 0, 1, 1])?;
                    weigh(t, y, 28)
                },
                &a,
                eps,
            )
            .unwrap(),
        ),
    ];
    let qkv = [
        random_tensor(&mut rng, &[7, 2, 3], false),
        random_tensor(&mut rng, &[7, 2, 3], false),
        random_tensor(&mut rng, &[7, 2, 3], false),
    ];
    ops.push((
        "attention",
        grad_check_multi(
            |t, v| {
                let y = t.attention(v[0], v[1], v[2], &[0, 3, 6, 7])?;
                weigh(t, y, 29)
            },
            &qkv,
            eps,
        )
        .unwrap(),
    ));
    let gamma = random_tensor(&mut rng, &[1, 3], false);
    let beta = random_tensor(&mut rng, &[1, 3], false);
    ops.push((
        "prompted_norm",
        grad_check_multi(
            |t, v| {
                let y = prompted_norm(t, v[0], v[1], v[2])?;
                weigh(t, y, 30)
            },
            &[a.clone(), gamma, beta],
            eps,
        )
        .unwrap(),
    ));
    let logits = random_tensor(&mut rng, &[6, NUM_CLASSES], false);
    let labels = [0, 3, 6, 255, 3, 1];
    ops.push((
        "cross_entropy",
        grad_check(
            |t, v| Ok(cross_entropy(t, v, &labels, 255)?.var),
            &logits,
            eps,
        )
        .unwrap(),
    ));
    ops.push((
        "lovasz_softmax",
        grad_check(
            |t, v| {
                let pr = t.softmax(v, 1)?;
                Ok(lovasz_softmax(t, pr, &labels, 255)?.var)
            },
            &logits,
            eps,
        )
        .unwrap(),
    ));
    let scan = random_scan(30, 41, "alice");
    let heads_da = param_check(&perturbed_model(Alignment::Da, 40), &scan, 30, 1, |n| {
        n.starts_with("head.da.alice")
    });
    let heads_la = param_check(&perturbed_model(Alignment::La, 41), &scan, 30, 2, |n| {
        n.starts_with("head.")
    });
    let own = |n: &str| !n.contains(".car.") && !n.contains(".spot.");
    let e2e_da = param_check(&perturbed_model(Alignment::Da, 42), &scan, 50, 3, own);
    let e2e_la = param_check(&perturbed_model(Alignment::La, 43), &scan, 50, 4, own);

    let op_worst = ops
        .iter()
        .cloned()
        .fold(("", 0.0), |w, o| if o.1 > w.1 { o } else { w });
    ensure(op_worst.1 < 1e-4, || {
        format!("{} rel err {:.2e}", op_worst.0, op_worst.1)
    })?;
    let (heads_da, n_hd) = heads_da;
    let (heads_la, n_hl) = heads_la;
    let (e2e_da, n_ed) = e2e_da;
    let (e2e_la, n_el) = e2e_la;
    ensure(n_hd + n_hl >= 30 && n_ed + n_el >= 50, || {
        format!("too few nonzero gradients sampled ({n_hd}, {n_hl}, {n_ed}, {n_el})")
    })?;
    ensure(heads_da < 1e-4 && heads_la < 1e-4, || {
        format!("heads rel err da {heads_da:.2e} la {heads_la:.2e}")
    })?;
    ensure(e2e_da < 1e-3 && e2e_la < 1e-3, || {
        format!("end-to-end rel err da {e2e_da:.2e} la {e2e_la:.2e}")
    })?;
    Ok(format!(
        "{} ops worst {:.1e} ({}); heads {:.1e} over {} coords; end-to-end 30 pts {:.1e} over {} coords",
        ops.len(),
        op_worst.1,
        op_worst.0,
        heads_da.max(heads_la),
        n_hd + n_hl,
        e2e_da.max(e2e_la),
        n_ed + n_el
    ))
}

/// Per-class Jaccard loss averaged over classes present in the ground truth.
fn jaccard_set_loss(pred: &[usize], gt: &[usize], classes: usize) -> Option<f64> {
    let mut total = 0.0;
    let mut present = 0;
    for c in 0..classes {
        if !gt.contains(&c) {
            continue;
        }
        let inter = pred
            .iter()
            .zip(gt)
            .filter(|(&p, &g)| p == c && g == c)
            .count();
        let union = pred
            .iter()
            .zip(gt)
            .filter(|(&p, &g)| p == c || g == c)
            .count();
        total += 1.0 - inter as f64 / union as f64;
        present += 1;
    }
    (present > 0).then(|| total / present as f64)
}

fn lovasz_oracle() -> Outcome {
    let mut cases = 0;
    for n in 1..=6usize {
        for gt_bits in 0..(1u32 << n) {
            let gt: Vec<usize> = (0..n).map(|i| (gt_bits >> i & 1) as usize).collect();
            for err_bits in 0..(1u32 << n) {
                let pred: Vec<usize> = (0..n)
                    .map(|i| {
                        if err_bits >> i & 1 == 1 {
                            1 - gt[i]
                        } else {
                            gt[i]
                        }
                    })
                    .collect();
                let probs: Vec<f64> = pred
                    .iter()
                    .flat_map(|&p| if p == 0 { [1.0, 0.0] } else { [0.0, 1.0] })
                    .collect();
                let t = Tensor::new(vec![n, 2], probs).unwrap();
                let got = lovasz_softmax_value(&t, &gt, 255).unwrap().unwrap();
                let want = jaccard_set_loss(&pred, &gt, 2).unwrap();
                ensure((got - want).abs() <= 1e-9, || {
                    format!("gt {gt:?} pred {pred:?}: surrogate {got} vs Jaccard {want}")
                })?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} vertices, N = 1..6, all within 1e-9"))
}

fn curve_suite() -> Outcome {
    let bits = 6;
    let side = 1u32 << bits;
    let cells = (side as usize).pow(3);
    for (name, enc, dec) in [
        (
            "morton",
            morton_encode as fn([u32; 3], u32) -> pptseg::Result<u64>,
            morton_decode as fn(u64, u32) -> [u32; 3],
        ),
        ("hilbert", hilbert_encode, hilbert_decode),
    ] {
        let mut seen = vec![false; cells];
        for x in 0..side {
            for y in 0..side {
                for z in 0..side {
                    let code = enc([x, y, z], bits).map_err(|e| e.to_string())?;
                    ensure((code as usize) < cells && !seen[code as usize], || {
                        format!("{name}: code {code} repeated or out of range")
                    })?;
                    seen[code as usize] = true;
                    ensure(dec(code, bits) == [x, y, z], || {
                        format!("{name}: decode mismatch at {:?}", [x, y, z])
                    })?;
                }
            }
        }
    }
    for k in 1..=5u32 {
        let n = 1u64 << (3 * k);
        let mut prev = hilbert_decode(0, k);
        for code in 1..n {
            let p = hilbert_decode(code, k);
            let dist: u32 = (0..3).map(|a| p[a].abs_diff(prev[a])).sum();
            ensure(dist == 1, || {
                format!("k={k}: codes {} and {code} are {dist} apart", code - 1)
            })?;
            prev = p;
        }
    }
    Ok(format!(
        "{cells}-cell bijection for both curves; Hilbert face-adjacent for k = 1..5"
    ))
}

fn metrics_oracle() -> Outcome {
    let mut m = ConfusionMatrix::new();
    m.update(&[0, 1, 1, 1], &[0, 0, 1, 1], 255)
        .map_err(|e| e.to_string())?;
    let s = m.summarize();
    ensure(
        (s.miou - 7.0 / 12.0).abs() < 1e-15 && s.macc == 0.75 && s.allacc == 0.75,
        || {
            format!(
                "hand example gave mIoU {} mAcc {} allAcc {}",
                s.miou, s.macc, s.allacc
            )
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..1000 {
        let n = rng.gen_range(1..300);
        let gt: Vec<usize> = (0..n).map(|_| rng.gen_range(0..NUM_CLASSES)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..NUM_CLASSES)).collect();
        let mut m = ConfusionMatrix::new();
        m.update(&pred, &gt, 255).map_err(|e| e.to_string())?;
        let s = m.summarize();
        for c in 0..NUM_CLASSES {
            let inter = pred
                .iter()
                .zip(&gt)
                .filter(|(&p, &g)| p == c && g == c)
                .count();
            let union = pred
                .iter()
                .zip(&gt)
                .filter(|(&p, &g)| p == c || g == c)
                .count();
            let ok = if union == 0 {
                s.per_class_iou[c].is_nan()
            } else {
                s.per_class_iou[c] == inter as f64 / union as f64
            };
            ensure(ok, || {
                format!(
                    "case {case} class {c}: {} vs {inter}/{union}",
                    s.per_class_iou[c]
                )
            })?;
        }
    }
    Ok("hand example mIoU 7/12; 1000 random pairs match brute-force set IoU exactly".into())
}

fn condition_isolation() -> Outcome {
    let mut checked = 0;
    for alignment in [Alignment::Da, Alignment::La] {
        let table = EmbeddingTable::orthonormal(16).unwrap();
        let model = SegModel::<f64>::new(small_config(alignment), 21, Some(table)).unwrap();
        for (k, cond) in ["car", "alice", "spot"].into_iter().enumerate() {
            let scan = random_scan(60, 30 + k as u64, cond);
            let prep = model.prepare(&scan).unwrap();
            let (_, grads) = model
                .loss_and_grads(
                    &prep,
                    scan.labels().unwrap(),
                    scan.condition(),
                    &LossConfig::default(),
                )
                .map_err(|e| e.to_string())?;
            for (i, name) in model.params().names().iter().enumerate() {
                match condition_of_param(name, model.config()) {
                    Some(owner) if owner != cond => ensure(!grads.is_nonzero(i), || {
                        format!("{alignment}: {name} has gradient from a {cond} batch")
                    })?,
                    Some(_) => {}
                    None if name.ends_with(".weight") => ensure(grads.is_nonzero(i), || {
                        format!("{alignment}: shared {name} got no gradient from {cond}")
                    })?,
                    None => {}
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} parameter/condition pairs; foreign affines and heads exactly zero, shared weights nonzero"))
}

fn overfit() -> Outcome {
    let scans = synthetic_dataset(&SyntheticConfig::default(), 0).map_err(|e| e.to_string())?;
    let model =
        SegModel::<f32>::new(synthetic_model_config(), 0, None).map_err(|e| e.to_string())?;
    let mut trainer =
        Trainer::new(model, synthetic_train_settings(), &scans).map_err(|e| e.to_string())?;
    ensure(trainer.total_steps <= 300, || {
        format!("{} steps scheduled", trainer.total_steps)
    })?;
    trainer
        .run(&scans, &[], |_, _| Ok(()))
        .map_err(|e| e.to_string())?;
    let report = trainer.evaluate(&scans).map_err(|e| e.to_string())?;
    let per = report.per_platform_miou();
    let text: Vec<String> = per.iter().map(|(c, m)| format!("{c} {m:.4}")).collect();
    ensure(
        per.len() == 3 && per.iter().all(|(_, m)| *m >= 0.95),
        || format!("train mIoU {}", text.join(", ")),
    )?;
    Ok(format!(
        "{} steps on 6 x 500 points; train mIoU {}",
        trainer.step,
        text.join(", ")
    ))
}

fn conditioning_benefit() -> Outcome {
    let train_cfg = SyntheticConfig {
        scans_per_platform: 4,
        ..SyntheticConfig::default()
    };
    let val_cfg = SyntheticConfig::default();
    let (mut cond_sum, mut single_sum) = (0.0, 0.0);
    let seeds = 3;
    for seed in 0..seeds {
        let train = synthetic_dataset(&train_cfg, 100 + seed).map_err(|e| e.to_string())?;
        let val = synthetic_dataset(&val_cfg, 200 + seed).map_err(|e| e.to_string())?;
        let base = synthetic_model_config();
        for (cfg, sum) in [
            (base.clone(), &mut cond_sum),
            (base.aliased_to_single(), &mut single_sum),
        ] {
            let model = SegModel::<f32>::new(cfg, seed, None).map_err(|e| e.to_string())?;
            let settings = TrainSettings {
                epochs: 30,
                batch_size: 2,
                seed,
                ..synthetic_train_settings()
            };
            let mut t = Trainer::new(model, settings, &train).map_err(|e| e.to_string())?;
            t.run(&train, &[], |_, _| Ok(()))
                .map_err(|e| e.to_string())?;
            let per = t
                .evaluate(&val)
                .map_err(|e| e.to_string())?
                .per_platform_miou();
            *sum += per.iter().map(|(_, m)| m).sum::<f64>() / per.len() as f64;
        }
    }
    let (c, s) = (cond_sum / seeds as f64, single_sum / seeds as f64);
    ensure(c >= s + 0.03, || {
        format!("conditioned {c:.4} vs shared {s:.4}")
    })?;
    Ok(format!(
        "mean val mIoU over {seeds} seeds: conditioned {c:.4}, shared affine {s:.4}, gain {:+.4}",
        c - s
    ))
}

fn train_in(dir: &Path) -> Result<(String, AnyCheckpoint), String> {
    let data = dir.join("data");
    let cfg_data = SyntheticConfig {
        scans_per_platform: 1,
        ..SyntheticConfig::default()
    };
    let train = synthetic_dataset(&cfg_data, 5).map_err(|e| e.to_string())?;
    let val = synthetic_dataset(&cfg_data, 6).map_err(|e| e.to_string())?;
    write_dataset(&data, "train", Split::Train, &train, 0.05, 1).map_err(|e| e.to_string())?;
    write_dataset(&data, "val", Split::Val, &val, 0.05, 2).map_err(|e| e.to_string())?;
    let mut cfg = synthetic_run_config();
    cfg.precision = pptseg::Precision::F64;
    cfg.train.epochs = 3;
    let text = cfg.to_toml().map_err(|e| e.to_string())?;
    let cfg = RunConfig::parse(&text, &data).map_err(|e| e.to_string())?;
    let out = run_training(&cfg).map_err(|e| e.to_string())?;
    let log = std::fs::read_to_string(&out.metrics_log).map_err(|e| e.to_string())?;
    let ck = load_checkpoint(cfg.output_dir.join(CHECKPOINT_FILE)).map_err(|e| e.to_string())?;
    ensure(out.metrics_log.ends_with(METRICS_LOG_FILE), || {
        "metric log path".into()
    })?;
    Ok((log, ck))
}

fn determinism_and_checkpoint() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (log_a, ck_a) = train_in(a.path())?;
    let (log_b, _) = train_in(b.path())?;
    ensure(log_a == log_b, || {
        format!("metric logs differ:\n{log_a}\n{log_b}")
    })?;
    ensure(log_a.lines().count() == 3, || {
        format!("expected 3 epochs, got:\n{log_a}")
    })?;
    let AnyCheckpoint::F64(ck) = ck_a else {
        return Err("checkpoint precision changed".into());
    };
    let scans = synthetic_dataset(
        &SyntheticConfig {
            scans_per_platform: 1,
            ..SyntheticConfig::default()
        },
        9,
    )
    .map_err(|e| e.to_string())?;
    let bytes = ck.to_bytes().map_err(|e| e.to_string())?;
    let AnyCheckpoint::F64(back) = checkpoint_from_bytes(&bytes).map_err(|e| e.to_string())? else {
        return Err("round trip changed precision".into());
    };
    ensure(back.to_bytes().map_err(|e| e.to_string())? == bytes, || {
        "re-saved bytes differ".into()
    })?;
    let before = evaluate_model(&ck.model, &scans, 255).map_err(|e| e.to_string())?;
    let after = evaluate_model(&back.model, &scans, 255).map_err(|e| e.to_string())?;
    ensure(before == after, || {
        "evaluation changed after round trip".into()
    })?;
    for s in &scans {
        ensure(
            ck.model.predict_scan(s).unwrap() == back.model.predict_scan(s).unwrap(),
            || "predictions differ".into(),
        )?;
    }
    Ok("two seeded runs give identical metric logs; save/load leaves bytes and evaluation unchanged".into())
}

fn schedule_and_optimizer() -> Outcome {
    let shape = OneCycle::default();
    let total = 1000;
    let start = onecycle_lr(0, total, 8e-4, &shape).map_err(|e| e.to_string())?;
    let peak = onecycle_lr(100, total, 8e-4, &shape).map_err(|e| e.to_string())?;
    let end = onecycle_lr(total, total, 8e-4, &shape).map_err(|e| e.to_string())?;
    ensure((start - 3.2e-5).abs() <= 1e-12, || format!("start {start}"))?;
    ensure((peak - 8e-4).abs() <= 1e-12, || format!("peak {peak}"))?;
    ensure((end - 8e-8).abs() <= 1e-12, || format!("end {end}"))?;
    let mut theta = [1.0f64];
    let mut st = AdamState::new(1);
    adamw_update(&mut theta, &[0.0], &mut st, 0.001, 0.005, 0.9, 0.999, 1e-8);
    ensure((theta[0] - (1.0 - 0.001 * 0.005)).abs() <= 1e-12, || {
        format!("decay step gave {}", theta[0])
    })?;
    Ok(format!(
        "lr {start:e} / {peak:e} / {end:e}; zero-gradient step {}",
        theta[0]
    ))
}

fn main() -> ExitCode {
    let criteria: Vec<Criterion> = vec![
        ("gradient suite", Duration::from_secs(60), gradient_suite),
        ("lovasz oracle", Duration::from_secs(10), lovasz_oracle),
        ("curve suite", Duration::from_secs(30), curve_suite),
        ("metrics oracle", Duration::from_secs(10), metrics_oracle),
        (
            "condition isolation",
            Duration::from_secs(30),
            condition_isolation,
        ),
        ("overfit smoke test", Duration::from_secs(300), overfit),
        (
            "conditioning benefit",
            Duration::from_secs(900),
            conditioning_benefit,
        ),
        (
            "determinism and checkpoint",
            Duration::from_secs(300),
            determinism_and_checkpoint,
        ),
        (
            "onecycle and adamw",
            Duration::from_secs(10),
            schedule_and_optimizer,
        ),
    ];
    let mut failed = 0;
    for (name, budget, run) in criteria {
        let t0 = Instant::now();
        let outcome = run();
        let took = t0.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > budget => Err(format!(
                "{detail}; over budget ({:.1}s > {}s)",
                took.as_secs_f64(),
                budget.as_secs()
            )),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{:.1}s]", took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} [{:.1}s]", took.as_secs_f64());
            }
        }
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
