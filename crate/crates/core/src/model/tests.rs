use super::*;
use crate::tensor::gradcheck::{check_gradients, GradCheckConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small(backbone: Backbone, attention: AttentionKind, mode: PredictionMode) -> ModelConfig {
    ModelConfig {
        backbone,
        attention,
        mode,
        embed_dim: 8,
        heads: 2,
        widths: vec![4, 6],
        input_height: 16,
        input_width: 16,
        seed: 3,
        ..ModelConfig::default()
    }
}

fn images(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    random(&[n, 1, h, w], seed).map(|v| 0.5 + 0.5 * v)
}

#[test]
fn head_width_follows_mode() {
    let full = SimicModel::build(&ModelConfig::default()).unwrap();
    assert_eq!(full.outputs(), 3);
    for b in Backbone::ALL {
        let cfg = ModelConfig {
            backbone: b,
            mode: PredictionMode::Half,
            ..ModelConfig::default()
        };
        assert_eq!(SimicModel::build(&cfg).unwrap().outputs(), 1);
    }
}

#[test]
fn equal_seeds_give_identical_parameters() {
    let cfg = ModelConfig {
        attention: AttentionKind::MultiHead,
        ..ModelConfig::default()
    };
    let a = SimicModel::build(&cfg).unwrap();
    let b = SimicModel::build(&cfg).unwrap();
    assert_eq!(checkpoint::encode(&a), checkpoint::encode(&b));
    let c = SimicModel::build(&ModelConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(checkpoint::encode(&a), checkpoint::encode(&c));
}

#[test]
fn indivisible_heads_rejected() {
    let cfg = ModelConfig {
        attention: AttentionKind::MultiHead,
        embed_dim: 10,
        heads: 4,
        ..ModelConfig::default()
    };
    assert!(matches!(SimicModel::build(&cfg), Err(SimicError::Config { .. })));
}

#[test]
fn initialization_conventions() {
    let m = SimicModel::build(&ModelConfig::default()).unwrap();
    for (_, p) in m.params().iter() {
        let d = p.value.data();
        if p.name.ends_with(".bias") || p.name.ends_with(".beta") || p.name.ends_with("running_mean") {
            assert!(d.iter().all(|&v| v == 0.0), "{}", p.name);
        } else if p.name.ends_with(".gamma") || p.name.ends_with("running_var") {
            assert!(d.iter().all(|&v| v == 1.0), "{}", p.name);
        } else {
            let fan_in: usize = p.value.shape()[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            assert!(d.iter().all(|v| v.abs() <= bound), "{}", p.name);
        }
    }
}

#[test]
fn coord_channels_two_by_two() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let y = add_coord_channels(&x).unwrap();
    assert_eq!(y.shape(), &[1, 3, 2, 2]);
    assert_eq!(&y.data()[0..4], x.data());
    assert_eq!(&y.data()[4..8], &[-1.0, 1.0, -1.0, 1.0]);
    assert_eq!(&y.data()[8..12], &[-1.0, -1.0, 1.0, 1.0]);
}

#[test]
fn coord_channels_degenerate_axis_is_zero() {
    let x = Tensor::zeros(&[2, 1, 1, 3]);
    let y = add_coord_channels(&x).unwrap();
    for s in 0..2 {
        let base = s * 9;
        assert_eq!(&y.data()[base + 3..base + 6], &[-1.0, 0.0, 1.0]);
        assert_eq!(&y.data()[base + 6..base + 9], &[0.0, 0.0, 0.0]);
    }
    assert!(add_coord_channels(&Tensor::zeros(&[1, 2, 2, 2])).is_err());
}

#[test]
fn feature_grid_at_64() {
    let cfg = ModelConfig::default();
    let m = SimicModel::build(&cfg).unwrap();
    assert_eq!(m.feature_grid(), (8, 8));
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, false);
    let mut ctx = Ctx {
        tape: &mut tape,
        vars: &vars,
        params: m.params(),
        train: false,
        bn_updates: Vec::new(),
    };
    let x = ctx.tape.constant(add_coord_channels(&images(1, 64, 64, 0)).unwrap());
    let f = m.backbone.forward(&mut ctx, x).unwrap();
    assert_eq!(tape.shape(f), &[1, 64, 8, 8]);
}

#[test]
fn input_smaller_than_downsampling_rejected() {
    let cfg = ModelConfig {
        input_height: 4,
        input_width: 4,
        ..ModelConfig::default()
    };
    assert!(SimicModel::build(&cfg).is_err());
}

#[test]
fn zero_structure_embedding_is_zero() {
    let cfg = ModelConfig {
        mode: PredictionMode::Half,
        ..ModelConfig::default()
    };
    let mut m = SimicModel::build(&cfg).unwrap();
    for name in ["structure.embed.weight", "structure.embed.bias"] {
        let id = m.params().find(name).unwrap();
        m.params_mut().get_mut(id).value.data_mut().fill(0.0);
    }
    let q = m.embed_structure(&Tensor::new(&[1, 2], vec![0.7, -1.2]).unwrap()).unwrap();
    assert_eq!(q.shape(), &[1, 64]);
    assert!(q.data().iter().all(|&v| v == 0.0));
    let full = SimicModel::build(&ModelConfig::default()).unwrap();
    assert!(full.embed_structure(&Tensor::zeros(&[1, 2])).is_err());
}

#[test]
fn structure_path_contract() {
    let full = SimicModel::build(&small(Backbone::Residual, AttentionKind::None, PredictionMode::Full)).unwrap();
    let half = SimicModel::build(&small(Backbone::Residual, AttentionKind::None, PredictionMode::Half)).unwrap();
    let x = images(2, 16, 16, 1);
    let s = Tensor::zeros(&[2, 2]);
    let mut tape = Tape::new();
    let vars = full.bind(&mut tape, false);
    assert!(full.forward(&mut tape, &vars, &x, Some(&s), false).is_err());
    let mut tape = Tape::new();
    let vars = half.bind(&mut tape, false);
    assert!(half.forward(&mut tape, &vars, &x, None, false).is_err());
    let out = half.forward(&mut tape, &vars, &x, Some(&s), false).unwrap();
    assert_eq!(tape.shape(out.predictions), &[2, 1]);
}

/// Runs `model` on a fresh tape with its current parameters.
fn run(model: &SimicModel, x: &Tensor, s: Option<&Tensor>, train: bool) -> (Tensor, Option<Tensor>) {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let out = model.forward(&mut tape, &vars, x, s, train).unwrap();
    (
        tape.value(out.predictions).clone(),
        out.attention.map(|a| tape.value(a).clone()),
    )
}

#[test]
fn every_configuration_runs_at_64() {
    let x = images(2, 64, 64, 5);
    let s = Tensor::new(&[2, 2], vec![0.3, -0.2, 1.1, 0.4]).unwrap();
    for b in Backbone::ALL {
        for a in AttentionKind::ALL {
            for mode in PredictionMode::ALL {
                let cfg = ModelConfig {
                    backbone: b,
                    attention: a,
                    mode,
                    ..ModelConfig::default()
                };
                let m = SimicModel::build(&cfg).unwrap();
                let s = (mode == PredictionMode::Half).then_some(&s);
                for train in [true, false] {
                    let (pred, att) = run(&m, &x, s, train);
                    assert_eq!(pred.shape(), &[2, mode.outputs()], "{cfg:?}");
                    assert!(pred.is_finite());
                    assert_eq!(att.is_some(), a != AttentionKind::None);
                    if let Some(att) = att {
                        let h = if a == AttentionKind::MultiHead { 4 } else { 1 };
                        assert_eq!(att.shape(), &[2, h, 64]);
                        for row in att.data().chunks(64) {
                            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                            assert!(row.iter().all(|&w| w >= 0.0));
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let cfg = ModelConfig {
        attention: AttentionKind::Additive,
        mode: PredictionMode::Half,
        ..ModelConfig::default()
    };
    let x = images(3, 64, 64, 9);
    let s = Tensor::new(&[3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    let a = run(&SimicModel::build(&cfg).unwrap(), &x, Some(&s), true);
    let b = run(&SimicModel::build(&cfg).unwrap(), &x, Some(&s), true);
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.unwrap().data(), b.1.unwrap().data());
}

fn gradcheck_model(cfg: &ModelConfig, per_tensor: usize) -> f64 {
    let model = SimicModel::build(cfg).unwrap();
    let x = images(2, cfg.input_height, cfg.input_width, 11);
    let s = Tensor::new(&[2, 2], vec![0.4, -0.9, -1.3, 0.2]).unwrap();
    let s = cfg.needs_structure().then_some(s);
    let target = random(&[2, cfg.mode.outputs()], 12);
    let values: Vec<Tensor> = model.params().iter().map(|(_, p)| p.value.clone()).collect();
    let mut worst: f64 = 0.0;
    for (id, p) in model.params().iter() {
        if !p.trainable {
            continue;
        }
        let gc = GradCheckConfig {
            samples: per_tensor,
            seed: id.index() as u64,
            ..GradCheckConfig::default()
        };
        let report = check_gradients(&values, &[id.index()], &gc, |tape, vars| {
            let out = model.forward(tape, vars, &x, s.as_ref(), true)?;
            let t = tape.constant(target.clone());
            tape.huber(out.predictions, t, 1.0, true)
        })
        .unwrap();
        let e = report.max_rel_err();
        assert!(e <= 1e-3, "{} {:?}: {:?}", p.name, cfg, report.worst());
        worst = worst.max(e);
    }
    worst
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for (b, a, m) in [
        (Backbone::Residual, AttentionKind::None, PredictionMode::Full),
        (Backbone::Compound, AttentionKind::Additive, PredictionMode::Half),
        (Backbone::Depthwise, AttentionKind::MultiHead, PredictionMode::Full),
        (Backbone::Residual, AttentionKind::MultiHead, PredictionMode::Half),
    ] {
        gradcheck_model(&small(b, a, m), 3);
    }
}

#[test]
fn structure_embedding_gradient_matches_finite_differences() {
    let cfg = small(Backbone::Residual, AttentionKind::Additive, PredictionMode::Half);
    let model = SimicModel::build(&cfg).unwrap();
    let x = images(2, 16, 16, 4);
    let s = Tensor::new(&[2, 2], vec![0.4, -0.9, -1.3, 0.2]).unwrap();
    let target = random(&[2, 1], 5);
    let values: Vec<Tensor> = model.params().iter().map(|(_, p)| p.value.clone()).collect();
    let w = model.params().find("structure.embed.weight").unwrap().index();
    let report = check_gradients(&values, &[w], &GradCheckConfig::default(), |tape, vars| {
        let out = model.forward(tape, vars, &x, Some(&s), true)?;
        let t = tape.constant(target.clone());
        tape.huber(out.predictions, t, 1.0, true)
    })
    .unwrap();
    assert_eq!(report.checks.len(), 16);
    assert!(report.max_rel_err() <= 1e-3, "{:?}", report.worst());
}

#[test]
fn attention_weights_are_distributions_for_random_inputs() {
    for seed in 0..20 {
        let mut tape = Tape::new();
        let (n, p, d) = (3, 7, 8);
        let q = tape.constant(random(&[n, d], seed).map(|v| 3.0 * v));
        let k = tape.constant(random(&[n, p, d], seed + 100).map(|v| 3.0 * v));
        let v = tape.constant(random(&[n, p, d], seed + 200));
        let wq = tape.constant(random(&[d, d], seed + 300));
        let wk = tape.constant(random(&[d, d], seed + 400));
        let u = tape.constant(random(&[1, d], seed + 500).map(|v| 5.0 * v));
        let (_, a) = additive_attention(&mut tape, q, k, v, wq, wk, u).unwrap();
        let (_, m) = multihead_attention(&mut tape, q, k, v, 4).unwrap();
        for w in [a, m] {
            for row in tape.value(w).data().chunks(p) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }
}

#[test]
fn additive_weights_invariant_to_score_shift() {
    let mut tape = Tape::new();
    let (n, p, d) = (2, 5, 4);
    let q = tape.constant(random(&[n, d], 1));
    let k = tape.constant(random(&[n, p, d], 2));
    let wq = tape.constant(random(&[d, d], 3));
    let wk = tape.constant(random(&[d, d], 4));
    let u = tape.constant(random(&[1, d], 5));
    let scores = additive_scores(&mut tape, q, k, wq, wk, u).unwrap();
    let base = tape.softmax(scores).unwrap();
    let shift = tape.constant(Tensor::full(&[n, p], 123.456));
    let shifted = tape.add(scores, shift).unwrap();
    let moved = tape.softmax(shifted).unwrap();
    for (a, b) in tape.value(base).data().iter().zip(tape.value(moved).data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

fn permute_positions(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let (n, p, d) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(t.len());
    for b in 0..n {
        for &j in perm {
            out.extend_from_slice(&t.data()[(b * p + j) * d..(b * p + j + 1) * d]);
        }
    }
    Tensor::new(s, out).unwrap()
}

#[test]
fn attention_is_position_equivariant() {
    let (n, p, d) = (2, 6, 8);
    let perm = [3, 0, 5, 1, 4, 2];
    let q = random(&[n, d], 1);
    let k = random(&[n, p, d], 2);
    let v = random(&[n, p, d], 3);
    let (wq, wk, u) = (random(&[d, d], 4), random(&[d, d], 5), random(&[1, d], 6));
    let eval = |k: &Tensor, v: &Tensor, additive: bool| {
        let mut tape = Tape::new();
        let qv = tape.constant(q.clone());
        let kv = tape.constant(k.clone());
        let vv = tape.constant(v.clone());
        let (z, w) = if additive {
            let (a, b, c) = (tape.constant(wq.clone()), tape.constant(wk.clone()), tape.constant(u.clone()));
            additive_attention(&mut tape, qv, kv, vv, a, b, c).unwrap()
        } else {
            multihead_attention(&mut tape, qv, kv, vv, 2).unwrap()
        };
        (tape.value(z).clone(), tape.value(w).clone())
    };
    for additive in [true, false] {
        let (z0, w0) = eval(&k, &v, additive);
        let (z1, w1) = eval(&permute_positions(&k, &perm), &permute_positions(&v, &perm), additive);
        for (a, b) in z0.data().iter().zip(z1.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (r0, r1) in w0.data().chunks(p).zip(w1.data().chunks(p)) {
            for (i, &j) in perm.iter().enumerate() {
                assert!((r1[i] - r0[j]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn running_stats_move_toward_batch_stats() {
    let cfg = small(Backbone::Compound, AttentionKind::None, PredictionMode::Full);
    let mut m = SimicModel::build(&cfg).unwrap();
    let x = images(4, 16, 16, 2);
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, false);
    let out = m.forward(&mut tape, &vars, &x, None, true).unwrap();
    assert!(!out.bn_updates.is_empty());
    let first = &out.bn_updates[0];
    let expect_mean: Vec<f64> = first.stats.mean.iter().map(|b| 0.1 * b).collect();
    m.commit_running_stats(&out.bn_updates);
    let got = m.params().get(first.mean).value.data();
    for (a, b) in got.iter().zip(&expect_mean) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn normalization_round_trips() {
    let labels = [
        TipLabels { width_um: 0.2, height_um: 0.3, radius_um: 0.05 },
        TipLabels { width_um: 0.4, height_um: 0.5, radius_um: 0.07 },
    ];
    let n = Normalization::fit(&labels).unwrap();
    assert!((n.mean[0] - 0.3).abs() < 1e-15 && (n.std[0] - 0.1).abs() < 1e-15);
    let t = n.targets(&labels, PredictionMode::Full).unwrap();
    let back = n.denormalize(t.data(), PredictionMode::Full);
    for (b, l) in back.chunks(3).zip(&labels) {
        for (x, y) in b.iter().zip(l.as_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    let r = n.targets(&labels, PredictionMode::Half).unwrap();
    assert_eq!(r.shape(), &[2, 1]);
    assert!((r.data()[0] + 1.0).abs() < 1e-12);
    let s = n.structure(&[[0.4, 0.3]]).unwrap();
    assert!((s.data()[0] - 1.0).abs() < 1e-12 && (s.data()[1] + 1.0).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = small(Backbone::Depthwise, AttentionKind::MultiHead, PredictionMode::Half);
    let mut m = SimicModel::build(&cfg).unwrap();
    m.normalization = Normalization {
        mean: [0.3, 0.37, 0.055],
        std: [0.058, 0.072, 0.0144],
    };
    let x = images(2, 16, 16, 3);
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, false);
    let s = Tensor::zeros(&[2, 2]);
    let out = m.forward(&mut tape, &vars, &x, Some(&s), true).unwrap();
    m.commit_running_stats(&out.bn_updates);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path, Some(&cfg)).unwrap();
    assert_eq!(back.normalization, m.normalization);
    assert_eq!(checkpoint::encode(&back), checkpoint::encode(&m));
    let a = run(&m, &x, Some(&s), false);
    let b = run(&back, &x, Some(&s), false);
    assert_eq!(a.0.data(), b.0.data());

    let other = ModelConfig { heads: 4, ..cfg.clone() };
    match load_checkpoint(&path, Some(&other)) {
        Err(SimicError::Config { field, .. }) => assert_eq!(field, "heads"),
        r => panic!("expected config mismatch, got {r:?}"),
    }
}

#[test]
fn checkpoint_rejects_corruption() {
    let m = SimicModel::build(&small(Backbone::Residual, AttentionKind::None, PredictionMode::Full)).unwrap();
    let bytes = checkpoint::encode(&m);
    assert!(checkpoint::decode(&bytes[..bytes.len() - 8], None).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::decode(&bad, None).is_err());
    assert!(checkpoint::decode(&bytes, None).is_ok());
}

#[test]
fn constant_map_renders_mid_gray() {
    assert_eq!(rescale_to_gray(&[1.0 / 64.0; 64]), vec![128; 64]);
    assert_eq!(rescale_to_gray(&[0.0, 0.5, 1.0]), vec![0, 128, 255]);
}

#[test]
fn nearest_upsample_covers_blocks() {
    let grid: Vec<f64> = (0..64).map(f64::from).collect();
    let up = upsample_nearest(&grid, 8, 8, 64, 64);
    for y in 0..64 {
        for x in 0..64 {
            assert_eq!(up[y * 64 + x], grid[(y / 8) * 8 + x / 8]);
        }
    }
}

#[test]
fn export_writes_one_image_per_head_and_all_weights() {
    let maps = AttentionMaps {
        sample_id: "tip".into(),
        heads: 4,
        grid_h: 8,
        grid_w: 8,
        weights: vec![1.0 / 64.0; 256],
    };
    let dir = tempfile::tempdir().unwrap();
    let files = export_attention_map(&maps, (64, 64), dir.path(), "tip").unwrap();
    assert_eq!(files.len(), 5);
    let img = GrayImage::read(&files[0]).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));
    assert!(img.pixels().iter().all(|&p| p == 128));
    let csv = std::fs::read_to_string(&files[4]).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 64);
}
