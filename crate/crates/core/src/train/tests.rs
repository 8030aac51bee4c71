use super::*;
use crate::masks::{MaskKind, MaskLayout};
use crate::vconv::{Strategy, Variant};

fn tiny_config(variant: Variant, strategy: Strategy) -> ModelConfig {
    ModelConfig {
        variant,
        strategy,
        s: 2,
        chat: 2,
        g: 2,
        widths: vec![4, 4],
        kernel: 3,
    }
}

fn batch(n: usize, seed: u64) -> (Vec<Tensor<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = (0..n).map(|_| Tensor::random_uniform(&[6, 6, 1], 0.0, 1.0, &mut rng)).collect();
    let ys = (0..n).map(|i| i % 3).collect();
    (xs, ys)
}

#[test]
fn cross_entropy_of_confident_logits_is_near_zero() {
    let (l, g) = sample_loss(&[50.0f64, 0.0, 0.0], 0, Loss::CrossEntropy).unwrap();
    assert!(l < 1e-20);
    assert!(g.iter().all(|v| v.abs() < 1e-20));
    let (l, _) = sample_loss(&[0.0f64, 1.0, 0.0], 1, Loss::MeanSquaredError).unwrap();
    assert_eq!(l, 0.0);
}

#[test]
fn cross_entropy_gradient_matches_differences() {
    let z = [0.3f64, -1.2, 0.7, 2.0];
    let (_, g) = sample_loss(&z, 2, Loss::CrossEntropy).unwrap();
    for i in 0..z.len() {
        let mut a = z;
        let mut b = z;
        a[i] += 1e-6;
        b[i] -= 1e-6;
        let fd = (sample_loss(&a, 2, Loss::CrossEntropy).unwrap().0 - sample_loss(&b, 2, Loss::CrossEntropy).unwrap().0) / 2e-6;
        assert!((fd - g[i]).abs() < 1e-8);
    }
}

#[test]
fn label_out_of_range() {
    assert!(matches!(
        sample_loss(&[0.0f32; 3], 3, Loss::CrossEntropy),
        Err(Error::LabelOutOfRange { label: 3, classes: 3 })
    ));
}

#[test]
fn total_loss_adds_lambda_times_ortho() {
    let layout = MaskLayout {
        kind: MaskKind::LearnedShared,
        d: 3,
        c: 2,
        per_filter: 2,
        blocks: 1,
    };
    let ones = MaskSet::all_ones(layout).unwrap();
    let logits = vec![vec![0.1f64, 0.2], vec![0.5, -0.3]];
    let t = [0, 1];
    let base = total_loss(&logits, &t, &[], 0.0, Loss::CrossEntropy).unwrap();
    let zero = total_loss(&logits, &t, &[&ones], 0.0, Loss::CrossEntropy).unwrap();
    assert_eq!(base.total, zero.total);
    let two = total_loss(&logits, &t, &[&ones, &ones], 0.1, Loss::CrossEntropy).unwrap();
    assert!((two.total - base.task - 0.2).abs() < 1e-15);
    assert!(total_loss(&logits, &t, &[], -1.0, Loss::CrossEntropy).is_err());
}

#[test]
fn sgd_examples() {
    let spec = crate::vconv::LayerSpec::standard(1, 1, 1, 1, 0);
    let mut bank = PrimaryFilterBank::new(&spec, vec![1.0f64], vec![0.0]).unwrap();
    sgd_step(&mut bank, &[0.0], &[0.0], 0.1).unwrap();
    assert_eq!(bank.filters, vec![1.0]);
    sgd_step(&mut bank, &[0.5], &[0.0], 0.1).unwrap();
    assert!((bank.filters[0] - 0.95).abs() < 1e-15);

    let mut a = vec![1.0f64, -2.0];
    let mut b = a.clone();
    sgd_update(&mut a, &[0.25, 0.5], 0.5).unwrap();
    sgd_update(&mut a, &[0.25, 0.5], 0.5).unwrap();
    sgd_update(&mut b, &[0.5, 1.0], 0.5).unwrap();
    assert_eq!(a, b);
    assert!(sgd_update(&mut a, &[0.0], 0.5).is_err());
}

#[test]
fn zero_learning_rate_leaves_model_unchanged() {
    for (v, s) in [
        (Variant::Learnable, Strategy::Separate),
        (Variant::Learnable, Strategy::Shared),
        (Variant::Spatial, Strategy::Shared),
    ] {
        let mut m = Model::<f64>::build((6, 6, 1), 3, &tiny_config(v, s), 5).unwrap();
        let before = m.clone();
        let (xs, ys) = batch(6, 1);
        let cfg = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(cfg);
        let l0 = tr.train_step(&mut m, &xs, &ys).unwrap();
        let l1 = tr.train_step(&mut m, &xs, &ys).unwrap();
        assert_eq!(l0.loss, l1.loss);
        assert_eq!(l1.flip_rate, 0.0);
        // the agent state collapses onto the binary masks; everything else is untouched
        for (a, b) in m.layers.iter().zip(&before.layers) {
            match (a, b) {
                (Layer::Conv(x), Layer::Conv(y)) => {
                    assert_eq!(x.bank, y.bank);
                    assert_eq!(x.masks, y.masks);
                }
                _ => assert_eq!(a, b),
            }
        }
    }
}

#[test]
fn model_gradients_match_finite_differences() {
    for (v, s) in [
        (Variant::Standard, Strategy::Shared),
        (Variant::Spatial, Strategy::Shared),
        (Variant::Channel, Strategy::Shared),
        (Variant::Learnable, Strategy::Separate),
    ] {
        let m = Model::<f64>::build((6, 6, 1), 3, &tiny_config(v, s), 11).unwrap();
        let (xs, ys) = batch(3, 2);
        let loss_of = |m: &Model<f64>| {
            let z: Vec<Vec<f64>> = xs.iter().map(|x| m.forward(x).unwrap()).collect();
            total_loss(&z, &ys, &[], 0.0, Loss::CrossEntropy).unwrap().task
        };
        let prep = m.prepare().unwrap();
        let g = batch_gradients(&m, &prep, &xs, &ys, Loss::CrossEntropy, true).unwrap();
        let n = g.samples as f64;
        // second conv layer's primary filters and the dense weights
        let LayerGrad::Conv { secondary, .. } = &g.layers[3] else { panic!() };
        let Layer::Conv(conv) = &m.layers[3] else { panic!() };
        let (gf, _) = vconv::fold_secondary_grads(&conv.spec, &conv.bank, conv.masks.as_ref(), secondary).unwrap();
        let scale = conv.spec.gradient_scale() as f64;
        for idx in [0, 7, 20, gf.len() - 1] {
            let mut a = m.clone();
            let mut b = m.clone();
            let h = 1e-6;
            if let Layer::Conv(c) = &mut a.layers[3] {
                c.bank.filters[idx] += h;
            }
            if let Layer::Conv(c) = &mut b.layers[3] {
                c.bank.filters[idx] -= h;
            }
            let fd = (loss_of(&a) - loss_of(&b)) / (2.0 * h);
            let an = gf[idx] / n * scale;
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{v:?} f[{idx}]: fd {fd} vs {an}");
        }
        let LayerGrad::Dense { weights, .. } = &g.layers[6] else { panic!() };
        for idx in [0, 5, weights.len() - 1] {
            let mut a = m.clone();
            let mut b = m.clone();
            let h = 1e-6;
            if let Layer::Dense(d) = &mut a.layers[6] {
                d.weights[idx] += h;
            }
            if let Layer::Dense(d) = &mut b.layers[6] {
                d.weights[idx] -= h;
            }
            let fd = (loss_of(&a) - loss_of(&b)) / (2.0 * h);
            assert!((fd - weights[idx] / n).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }
}

#[test]
fn parallel_reduction_agrees_with_ordered_sum() {
    let m = Model::<f64>::build((6, 6, 1), 3, &tiny_config(Variant::Learnable, Strategy::Shared), 3).unwrap();
    let (xs, ys) = batch(8, 9);
    let prep = m.prepare().unwrap();
    let a = batch_gradients(&m, &prep, &xs, &ys, Loss::MeanSquaredError, true).unwrap();
    let b = batch_gradients(&m, &prep, &xs, &ys, Loss::MeanSquaredError, false).unwrap();
    assert_eq!(a.correct, b.correct);
    assert!((a.task_loss_sum - b.task_loss_sum).abs() < 1e-12);
}

#[test]
fn zero_momentum_is_plain_sgd() {
    let base = Model::<f64>::build((6, 6, 1), 3, &tiny_config(Variant::Spatial, Strategy::Shared), 1).unwrap();
    let (xs, ys) = batch(4, 4);
    let mut a = base.clone();
    let mut b = base.clone();
    let cfg = TrainConfig::default();
    train_step(&mut a, &xs, &ys, &cfg).unwrap();
    let mut tr = Trainer::new(TrainConfig {
        momentum: 0.9,
        ..cfg.clone()
    });
    tr.train_step(&mut b, &xs, &ys).unwrap();
    // first momentum step equals plain SGD; the second differs
    assert_eq!(a, b);
    train_step(&mut a, &xs, &ys, &cfg).unwrap();
    tr.train_step(&mut b, &xs, &ys).unwrap();
    assert_ne!(a, b);
}

#[test]
fn build_rejects_indivisible_widths() {
    let cfg = ModelConfig {
        widths: vec![5],
        ..tiny_config(Variant::Learnable, Strategy::Separate)
    };
    assert!(Model::<f32>::build((6, 6, 1), 3, &cfg, 0).is_err());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { lr: 0.0, ..Default::default() },
        TrainConfig { lambda: -0.1, ..Default::default() },
        TrainConfig { batch: 0, ..Default::default() },
        TrainConfig { momentum: 1.0, ..Default::default() },
    ] {
        assert!(bad.validate().is_err());
    }
    assert_eq!("mse".parse::<Loss>().unwrap(), Loss::MeanSquaredError);
}

#[test]
fn non_finite_loss_aborts() {
    let mut m = Model::<f64>::build((6, 6, 1), 3, &tiny_config(Variant::Standard, Strategy::Shared), 1).unwrap();
    if let Layer::Dense(d) = &mut m.layers[6] {
        d.weights[0] = f64::NAN;
    }
    let (xs, ys) = batch(2, 1);
    let err = train_step(&mut m, &xs, &ys, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }));
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let m = Model::<f32>::build((6, 6, 1), 3, &tiny_config(Variant::Learnable, Strategy::Separate), 2).unwrap();
    let bytes = write_checkpoint(&m).unwrap();
    let back = read_checkpoint(&bytes).unwrap();
    assert_eq!(back, m);
    assert_eq!(write_checkpoint(&back).unwrap(), bytes);

    let cut = bytes.len() - 3;
    match read_checkpoint(&bytes[..cut]) {
        Err(Error::Checkpoint { offset, msg }) => {
            assert!(offset <= cut, "{offset}");
            assert!(msg.contains("truncated"));
        }
        other => panic!("{other:?}"),
    }
    let mut foreign = bytes.clone();
    foreign[..4].copy_from_slice(b"PK\x03\x04");
    assert!(matches!(read_checkpoint(&foreign), Err(Error::Checkpoint { offset: 0, .. })));
    let mut newer = bytes.clone();
    newer[4] = 99;
    match read_checkpoint(&newer) {
        Err(Error::Checkpoint { offset: 4, msg }) => assert!(msg.contains("version")),
        other => panic!("{other:?}"),
    }
    let mut extra = bytes;
    extra.push(0);
    assert!(read_checkpoint(&extra).is_err());
}
