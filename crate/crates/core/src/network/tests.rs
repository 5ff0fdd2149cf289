use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{relative_error, Tape, Tensor};
use crate::data::{ConditionTag, PointScan, NUM_CLASSES};
use crate::error::Error;
use crate::losses::LossConfig;

fn tag(s: &str) -> ConditionTag {
    ConditionTag::new(s).unwrap()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        stage_channels: vec![8, 16],
        stage_depths: vec![1, 1],
        heads: 2,
        patch_size: 8,
        voxel_size: 0.01,
        ..ModelConfig::default()
    }
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

fn features(model: &SegModel<f64>, scan: &PointScan, cond: &str) -> Vec<f64> {
    let prep = model.prepare(scan).unwrap();
    let mut g = Graph::new(model.params());
    let h = model.encode(&mut g, &prep, &tag(cond)).unwrap();
    g.tape.value(h).to_vec()
}

#[test]
fn identity_affine_on_standardized_row() {
    let mut tape = Tape::<f64>::new();
    let row = [1.0, -1.0, 1.0, -1.0];
    let x = tape.constant(Tensor::new(vec![1, 4], row.to_vec()).unwrap());
    let g = tape.constant(Tensor::filled(vec![1, 4], 1.0));
    let b = tape.constant(Tensor::zeros(vec![1, 4]));
    let y = prompted_norm(&mut tape, x, g, b).unwrap();
    let scale = 1.0 / (1.0 + NORM_EPS).sqrt();
    for (o, i) in tape.value(y).iter().zip(row) {
        assert!((o - i * scale).abs() < 1e-12);
        assert!((o - i).abs() < 1e-5);
    }
}

#[test]
fn affines_differ_but_core_is_shared() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![2, 3], vec![0.5, 2.0, -1.0, 3.0, 3.5, 0.0]).unwrap());
    let g1 = tape.constant(Tensor::filled(vec![1, 3], 1.0));
    let g2 = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 0.5]).unwrap());
    let b = tape.constant(Tensor::zeros(vec![1, 3]));
    let core = layer_normalize(&mut tape, x).unwrap();
    let y1 = prompted_norm(&mut tape, x, g1, b).unwrap();
    let y1b = prompted_norm(&mut tape, x, g1, b).unwrap();
    let y2 = prompted_norm(&mut tape, x, g2, b).unwrap();
    assert_eq!(tape.value(y1), tape.value(y1b));
    assert_eq!(tape.value(y1), tape.value(core));
    assert_ne!(tape.value(y1), tape.value(y2));
}

#[test]
fn unknown_condition_is_rejected() {
    let model = SegModel::<f64>::new(small_config(), 0, None).unwrap();
    let scan = random_scan(10, 1, "car");
    let prep = model.prepare(&scan).unwrap();
    let mut g = Graph::new(model.params());
    let err = model.logits(&mut g, &prep, &tag("boat")).unwrap_err();
    assert!(matches!(err, Error::UnknownCondition(_)));
}

#[test]
fn aliases_share_parameters() {
    let mut cfg = small_config();
    cfg.condition_aliases.insert("spot1".into(), tag("spot"));
    let model = SegModel::<f64>::new(cfg, 3, None).unwrap();
    let scan = random_scan(20, 4, "spot");
    assert_eq!(
        features(&model, &scan, "spot"),
        features(&model, &scan, "spot1")
    );
}

#[test]
fn single_point_scan() {
    for alignment in [Alignment::Da, Alignment::La] {
        let cfg = ModelConfig {
            alignment,
            embed_dim: 16,
            ..small_config()
        };
        let table = EmbeddingTable::orthonormal(16).unwrap();
        let model = SegModel::<f32>::new(cfg, 0, Some(table)).unwrap();
        let scan = random_scan(1, 2, "alice");
        let prep = model.prepare(&scan).unwrap();
        let mut g = Graph::new(model.params());
        let h = model.encode(&mut g, &prep, scan.condition()).unwrap();
        assert_eq!(g.tape.shape(h), &[1, 8]);
        assert!(g.tape.value(h).iter().all(|v| v.is_finite()));
        let logits = model.logits(&mut g, &prep, scan.condition()).unwrap();
        assert_eq!(g.tape.shape(logits), &[1, NUM_CLASSES]);
    }
}

#[test]
fn logits_shape_for_many_sizes() {
    let model = SegModel::<f32>::new(small_config(), 5, None).unwrap();
    for n in [2, 7, 8, 9, 63, 200] {
        let scan = random_scan(n, n as u64, "car");
        let prep = model.prepare(&scan).unwrap();
        let mut g = Graph::new(model.params());
        let logits = model.logits(&mut g, &prep, scan.condition()).unwrap();
        assert_eq!(g.tape.shape(logits), &[n, NUM_CLASSES]);
        assert_eq!(model.predict_scan(&scan).unwrap().len(), n);
    }
}

#[test]
fn permutation_equivariance() {
    let model = SegModel::<f32>::new(small_config(), 7, None).unwrap();
    let scan = random_scan(150, 8, "car");
    let mut perm: Vec<usize> = (0..scan.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let shuffled = scan.select(&perm).unwrap();
    let run = |s: &PointScan| {
        let prep = model.prepare(s).unwrap();
        let mut g = Graph::new(model.params());
        let h = model.encode(&mut g, &prep, s.condition()).unwrap();
        g.tape.value(h).to_vec()
    };
    let base = run(&scan);
    let moved = run(&shuffled);
    let c = 8;
    for (k, &src) in perm.iter().enumerate() {
        for j in 0..c {
            let (a, b) = (moved[k * c + j], base[src * c + j]);
            assert!((a - b).abs() < 1e-5, "point {src} channel {j}: {a} vs {b}");
        }
    }
}

#[test]
fn conditions_with_distinct_affines_differ() {
    let mut model = SegModel::<f64>::new(small_config(), 11, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..model.params().len() {
        let name = model.params().name(i).to_string();
        if name.ends_with(".gamma") || name.ends_with(".beta") {
            for v in model.params_mut().tensor_mut(i).values_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
    }
    let scan = random_scan(40, 13, "car");
    let car = features(&model, &scan, "car");
    let spot = features(&model, &scan, "spot");
    assert_ne!(car, spot);
    assert!(car.iter().zip(&spot).any(|(a, b)| (a - b).abs() > 1e-3));
}

#[test]
fn fresh_affines_are_identical_across_conditions() {
    let model = SegModel::<f64>::new(small_config(), 11, None).unwrap();
    let scan = random_scan(40, 13, "car");
    assert_eq!(
        features(&model, &scan, "car"),
        features(&model, &scan, "alice")
    );
}

#[test]
fn language_head_picks_matching_row() {
    let cfg = ModelConfig {
        stage_channels: vec![16],
        stage_depths: vec![1],
        alignment: Alignment::La,
        embed_dim: 16,
        ..small_config()
    };
    let table = EmbeddingTable::orthonormal(16).unwrap();
    let mut model = SegModel::<f64>::new(cfg, 0, Some(table.clone())).unwrap();
    *model.params_mut().get_mut("head.la.proj.weight").unwrap() = Tensor::eye(16);
    *model.params_mut().get_mut("head.la.proj.bias").unwrap() = Tensor::zeros(vec![1, 16]);
    let rows: Vec<f64> = (0..NUM_CLASSES)
        .flat_map(|k| {
            table
                .row(k)
                .iter()
                .map(|&v| 3.0 * f64::from(v))
                .collect::<Vec<_>>()
        })
        .collect();
    let mut g = Graph::new(model.params());
    let feats = g
        .tape
        .constant(Tensor::new(vec![NUM_CLASSES, 16], rows).unwrap());
    let logits = model.head_language(&mut g, feats).unwrap();
    let vals = g.tape.value(logits);
    assert_eq!(
        argmax_rows(vals, NUM_CLASSES),
        (0..NUM_CLASSES).collect::<Vec<_>>()
    );
    let s = INITIAL_LOGIT_SCALE;
    for k in 0..NUM_CLASSES {
        assert!((vals[k * NUM_CLASSES + k] - s).abs() < 1e-9);
    }
}

#[test]
fn language_logits_bounded_and_zero_feature_is_finite() {
    let cfg = ModelConfig {
        alignment: Alignment::La,
        embed_dim: 512,
        ..small_config()
    };
    let table = EmbeddingTable::random_unit(512, 1).unwrap();
    let mut model = SegModel::<f64>::new(cfg, 2, Some(table)).unwrap();
    let scan = random_scan(30, 3, "spot");
    let prep = model.prepare(&scan).unwrap();
    let s = INITIAL_LOGIT_SCALE;
    {
        let mut g = Graph::new(model.params());
        let logits = model.logits(&mut g, &prep, scan.condition()).unwrap();
        assert!(g.tape.value(logits).iter().all(|v| v.abs() <= s + 1e-9));
    }
    for name in ["head.la.proj.weight", "head.la.proj.bias"] {
        let t = model.params_mut().get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape().to_vec());
    }
    let (loss, grads) = model
        .loss_and_grads(
            &prep,
            scan.labels().unwrap(),
            scan.condition(),
            &LossConfig::default(),
        )
        .unwrap();
    assert!(loss.unwrap().is_finite());
    for i in 0..grads.len() {
        if let Some(g) = grads.get(i) {
            assert!(g.iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn language_model_requires_matching_table() {
    let cfg = ModelConfig {
        alignment: Alignment::La,
        embed_dim: 16,
        ..small_config()
    };
    assert!(matches!(
        SegModel::<f32>::new(cfg.clone(), 0, None),
        Err(Error::Config(_))
    ));
    let wrong = EmbeddingTable::orthonormal(8).unwrap();
    assert!(matches!(
        SegModel::<f32>::new(cfg, 0, Some(wrong)),
        Err(Error::Config(_))
    ));
}

#[test]
fn zero_decoupled_head_gives_zero_logits() {
    let mut model = SegModel::<f64>::new(small_config(), 0, None).unwrap();
    for name in ["head.da.car.weight", "head.da.car.bias"] {
        let t = model.params_mut().get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape().to_vec());
    }
    let scan = random_scan(12, 1, "car");
    let prep = model.prepare(&scan).unwrap();
    let mut g = Graph::new(model.params());
    let logits = model.logits(&mut g, &prep, &tag("car")).unwrap();
    assert!(g.tape.value(logits).iter().all(|&v| v == 0.0));
    let other = model.logits(&mut g, &prep, &tag("alice")).unwrap();
    assert_ne!(g.tape.value(logits), g.tape.value(other));
}

#[test]
fn condition_isolation_and_shared_weights() {
    for alignment in [Alignment::Da, Alignment::La] {
        let cfg = ModelConfig {
            alignment,
            embed_dim: 16,
            ..small_config()
        };
        let table = EmbeddingTable::orthonormal(16).unwrap();
        let model = SegModel::<f64>::new(cfg, 21, Some(table)).unwrap();
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
                .unwrap();
            for (i, name) in model.params().names().iter().enumerate() {
                match condition_of_param(name, model.config()) {
                    Some(owner) if owner != cond => {
                        assert!(
                            grads.get(i).is_none_or(|g| g.iter().all(|&v| v == 0.0)),
                            "{name}"
                        );
                    }
                    Some(_) => {}
                    None => {
                        if name.ends_with(".weight") {
                            assert!(grads.is_nonzero(i), "{name} got no gradient from {cond}");
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn end_to_end_gradient_check() {
    for (alignment, seed) in [(Alignment::Da, 40), (Alignment::La, 41)] {
        let cfg = ModelConfig {
            alignment,
            embed_dim: 16,
            ..small_config()
        };
        let table = EmbeddingTable::random_unit(16, 3).unwrap();
        let mut model = SegModel::<f64>::new(cfg, seed, Some(table)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..model.params().len() {
            for v in model.params_mut().tensor_mut(i).values_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        let scan = random_scan(30, seed, "alice");
        let prep = model.prepare(&scan).unwrap();
        let labels = scan.labels().unwrap();
        let loss_cfg = LossConfig::default();
        let (_, grads) = model
            .loss_and_grads(&prep, labels, scan.condition(), &loss_cfg)
            .unwrap();
        let eps = 1e-6;
        let mut checked = 0;
        while checked < 50 {
            let i = rng.gen_range(0..model.params().len());
            if condition_of_param(model.params().name(i), model.config())
                .is_some_and(|c| c != "alice")
            {
                continue;
            }
            let j = rng.gen_range(0..model.params().tensor(i).numel());
            let analytic = grads.get(i).map_or(0.0, |g| g[j]);
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params_mut().tensor_mut(i).values_mut()[j] += delta;
                m.loss_and_grads(&prep, labels, scan.condition(), &loss_cfg)
                    .unwrap()
                    .0
                    .unwrap()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let err = relative_error(analytic, numeric);
            assert!(
                err < 1e-3 || (analytic - numeric).abs() < 1e-8,
                "{} [{j}]: analytic {analytic} numeric {numeric}",
                model.params().name(i)
            );
            checked += 1;
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let a = SegModel::<f64>::new(small_config(), 99, None).unwrap();
    let b = SegModel::<f64>::new(small_config(), 99, None).unwrap();
    let scan = random_scan(50, 1, "spot");
    assert_eq!(features(&a, &scan, "spot"), features(&b, &scan, "spot"));
}

#[test]
fn from_parts_checks_layout() {
    let model = SegModel::<f32>::new(small_config(), 0, None).unwrap();
    let mut cfg = small_config();
    cfg.stage_channels = vec![8, 32];
    let err = SegModel::from_parts(cfg, model.params().clone(), None).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)));
}
