use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use versatile_core::data::Dataset;
use versatile_core::masks::{agent_update, sign_binarize, AgentState, MaskKind, MaskLayout, MaskSet};
use versatile_core::tensor::Tensor;
use versatile_core::train::{
    batch_gradients, evaluate, load_checkpoint, save_checkpoint, Layer, LayerGrad, Loss, Model, ModelConfig,
    TrainConfig, Trainer,
};
use versatile_core::vconv::{Strategy, Variant};

fn random_batch(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> (Vec<Tensor<f64>>, Vec<usize>) {
    let images = (0..n).map(|_| Tensor::random_uniform(&[8, 8, 1], 0.0, 1.0, rng)).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    (images, labels)
}

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        strategy: Strategy::Separate,
        s: 2,
        widths: vec![4],
        ..ModelConfig::default()
    }
}

/// All-ones frozen masks make every secondary filter a copy of its primary,
/// so training must match a standard layer whose duplicated filters share
/// one summed gradient.
#[test]
fn frozen_all_ones_masks_match_tied_standard_layer() {
    let (s, classes) = (2, 3);
    let mut versatile = Model::<f64>::build((8, 8, 1), classes, &small(Variant::Learnable), 11).unwrap();
    versatile.freeze_masks();
    let mut tied = Model::<f64>::build((8, 8, 1), classes, &small(Variant::Standard), 11).unwrap();
    {
        let v = versatile.conv_layers().next().unwrap();
        assert_eq!(v.masks.as_ref().unwrap().density(), 1.0);
        let len = v.spec.patch_len();
        let mut filters = Vec::new();
        for i in 0..v.spec.k {
            for _ in 0..s {
                filters.extend_from_slice(&v.bank.filters[i * len..(i + 1) * len]);
            }
        }
        let (vb, vdense) = (v.bank.biases.clone(), versatile.layers.last().cloned().unwrap());
        let t = tied.conv_layers_mut().next().unwrap();
        t.bank.filters = filters;
        t.bank.biases = vb;
        *tied.layers.last_mut().unwrap() = vdense;
    }

    let cfg = TrainConfig {
        lr: 0.1,
        lambda: 0.0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..15 {
        let (images, labels) = random_batch(&mut rng, 8, classes);
        let rec = trainer.train_step(&mut versatile, &images, &labels).unwrap();

        let prep = tied.prepare().unwrap();
        let grads = batch_gradients(&tied, &prep, &images, &labels, Loss::CrossEntropy, true).unwrap();
        let inv = 1.0 / grads.samples as f64;
        assert_eq!(rec.task_loss, grads.task_loss_sum / grads.samples as f64);
        let lr = cfg.lr;
        for (layer, grad) in tied.layers.iter_mut().zip(&grads.layers) {
            match (layer, grad) {
                (Layer::Conv(conv), LayerGrad::Conv { secondary, biases }) => {
                    let len = conv.spec.patch_len();
                    let k = conv.spec.outputs() / s;
                    for i in 0..k {
                        let mut g = vec![0.0; len];
                        for j in 0..s {
                            let o = i * s + j;
                            for (a, &b) in g.iter_mut().zip(&secondary[o * len..(o + 1) * len]) {
                                *a += b * inv;
                            }
                        }
                        for j in 0..s {
                            let o = i * s + j;
                            for (p, &gv) in conv.bank.filters[o * len..(o + 1) * len].iter_mut().zip(&g) {
                                *p -= lr * gv;
                            }
                        }
                    }
                    for (p, &g) in conv.bank.biases.iter_mut().zip(biases) {
                        *p -= lr * (g * inv);
                    }
                }
                (Layer::Dense(d), LayerGrad::Dense { weights, biases }) => {
                    for (p, &g) in d.weights.iter_mut().zip(weights).chain(d.biases.iter_mut().zip(biases)) {
                        *p -= lr * (g * inv);
                    }
                }
                _ => {}
            }
        }
    }
    let (images, labels) = random_batch(&mut rng, 16, classes);
    let a = evaluate(&versatile, &images, &labels, Loss::CrossEntropy).unwrap();
    let b = evaluate(&tied, &images, &labels, Loss::CrossEntropy).unwrap();
    assert_eq!(a.loss, b.loss);
}

fn bars(n: usize, seed: u64) -> Dataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n {
        let label = rng.gen_range(0..2);
        let line = rng.gen_range(1..7);
        images.push(Tensor::from_fn(&[8, 8, 1], |idx| {
            let (r, c) = (idx / 8, idx % 8);
            let on = if label == 0 { r == line } else { c == line };
            f64::from(u8::from(on)) + 0.1 * rng.gen_range(-1.0..1.0)
        }));
        labels.push(label);
    }
    Dataset { images, labels, classes: 2 }
}

#[test]
fn spatial_model_separates_bars() {
    let data = bars(64, 2);
    let cfg = ModelConfig {
        variant: Variant::Spatial,
        widths: vec![4],
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::build((8, 8, 1), 2, &cfg, 4).unwrap();
    let mut trainer = Trainer::new(TrainConfig {
        lr: 0.1,
        epochs: 25,
        batch: 8,
        ..TrainConfig::default()
    });
    let log = trainer.fit(&mut model, &data, |_| {}).unwrap();
    assert_eq!(log.len(), 200);
    let report = evaluate(&model, &data.images, &data.labels, Loss::CrossEntropy).unwrap();
    assert_eq!(report.accuracy, 1.0);
    assert!(log.last().unwrap().loss < log[0].loss);
}

#[test]
fn checkpoint_file_round_trip_for_each_variant() {
    let dir = tempfile::tempdir().unwrap();
    let x = Tensor::<f32>::random_uniform(&[8, 8, 1], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    for (i, variant) in [Variant::Standard, Variant::Spatial, Variant::Channel, Variant::Learnable]
        .into_iter()
        .enumerate()
    {
        for strategy in [Strategy::Shared, Strategy::Separate, Strategy::RandomFixed] {
            let cfg = ModelConfig {
                variant,
                strategy,
                widths: vec![4, 8],
                chat: 2,
                g: 2,
                ..ModelConfig::default()
            };
            let model = Model::<f32>::build((8, 8, 1), 3, &cfg, i as u64).unwrap();
            let path = dir.path().join(format!("{i}-{strategy:?}.vflt"));
            save_checkpoint(&model, &path).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back, model);
            let (a, b) = (model.forward(&x).unwrap(), back.forward(&x).unwrap());
            assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}

#[test]
fn reset_rule_flips_ones_only_on_large_steps() {
    let layout = MaskLayout {
        kind: MaskKind::LearnedSeparate,
        d: 2,
        c: 1,
        per_filter: 1,
        blocks: 1,
    };
    let masks = MaskSet::from_fn(layout, |_, idx| idx < 2).unwrap();
    let mut agent = AgentState::new(layout, vec![0.9, 0.9, 0.0, 0.0]).unwrap();
    // ones: a step below 1 keeps the bit, a step of 1 clears it
    // zeros: any negative gradient sets the bit
    agent_update(&mut agent, &masks, &[0.99, 1.0, -1e-3, 0.5], 1.0).unwrap();
    let next = sign_binarize(&agent);
    assert_eq!((0..4).map(|i| next.get(0, i)).collect::<Vec<_>>(), vec![true, false, true, false]);
}
