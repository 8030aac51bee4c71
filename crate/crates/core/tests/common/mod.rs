//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use versatile_core::masks::{MaskLayout, MaskSet};
use versatile_core::tensor::{conv_reference, Tensor};
use versatile_core::vconv::{LayerSpec, PrimaryFilterBank, Strategy, Variant};

/// Nested centred squares written straight from the definition: mask `i`
/// (1-based) keeps rows and columns `i..=d+1-i`.
pub fn spatial_bits(d: usize, c: usize) -> Vec<Vec<bool>> {
    let s = d.div_ceil(2);
    (1..=s)
        .map(|i| {
            let mut bits = Vec::with_capacity(d * d * c);
            for p in 1..=d {
                for q in 1..=d {
                    let keep = i <= p && p <= d + 1 - i && i <= q && q <= d + 1 - i;
                    bits.extend(std::iter::repeat(keep).take(c));
                }
            }
            bits
        })
        .collect()
}

/// Window `w` keeps channels `w*g .. w*g + chat` at every spatial position.
pub fn channel_bits(d: usize, c: usize, chat: usize, g: usize) -> Vec<Vec<bool>> {
    let windows = (c - chat) / g + 1;
    (0..windows)
        .map(|w| (0..d * d * c).map(|idx| (w * g..w * g + chat).contains(&(idx % c))).collect())
        .collect()
}

/// Oracle bits per mask column plus the column used by secondary filter `(i, j)`.
pub struct OracleMasks {
    pub bits: Vec<Vec<bool>>,
    pub shared: bool,
    pub per_filter: usize,
}

impl OracleMasks {
    pub fn column(&self, i: usize, j: usize) -> usize {
        if self.shared {
            j
        } else {
            i * self.per_filter + j
        }
    }
}

pub fn random_bits(rng: &mut ChaCha8Rng, columns: usize, len: usize, density: f64) -> Vec<Vec<bool>> {
    (0..columns).map(|_| (0..len).map(|_| rng.gen_bool(density)).collect()).collect()
}

pub fn mask_set(layout: MaskLayout, bits: &[Vec<bool>]) -> MaskSet {
    MaskSet::from_fn(layout, |col, idx| bits[col][idx]).unwrap()
}

/// A random layer instance: spec, filters, library masks and oracle masks.
pub struct Instance {
    pub spec: LayerSpec,
    pub bank: PrimaryFilterBank<f64>,
    pub masks: Option<MaskSet>,
    pub oracle: Option<OracleMasks>,
    pub x: Tensor<f64>,
}

/// `kind` cycles through standard, spatial, channel, shared, separate and random-fixed.
pub fn random_instance(rng: &mut ChaCha8Rng, kind: usize) -> Instance {
    let d = rng.gen_range(1..=5);
    let c = rng.gen_range(1..=4);
    let k = rng.gen_range(1..=3);
    let stride = rng.gen_range(1..=2);
    let padding = rng.gen_range(0..=d / 2);
    let h = rng.gen_range(d.max(2)..=8);
    let w = rng.gen_range(d.max(2)..=8);
    let (spec, oracle) = match kind % 6 {
        0 => (LayerSpec::standard(d, c, k, stride, padding), None),
        1 => (
            LayerSpec::spatial(d, c, k, stride, padding),
            Some(OracleMasks {
                bits: spatial_bits(d, c),
                shared: true,
                per_filter: d.div_ceil(2),
            }),
        ),
        2 => {
            let chat = rng.gen_range(1..=c);
            let divisors: Vec<usize> = (1..=c).filter(|g| (c - chat) % g == 0).collect();
            let g = divisors[rng.gen_range(0..divisors.len())];
            let windows = (c - chat) / g + 1;
            (
                LayerSpec::channel(d, c, k, chat, g, stride, padding),
                Some(OracleMasks {
                    bits: channel_bits(d, c, chat, g),
                    shared: true,
                    per_filter: windows,
                }),
            )
        }
        other => {
            let s = rng.gen_range(1..=4);
            let strategy = [Strategy::Shared, Strategy::Separate, Strategy::RandomFixed][other - 3];
            let columns = if strategy == Strategy::Shared { s } else { k * s };
            (
                LayerSpec::learnable(d, c, k, s, strategy, stride, padding),
                Some(OracleMasks {
                    bits: random_bits(rng, columns, d * d * c, 0.5),
                    shared: strategy == Strategy::Shared,
                    per_filter: s,
                }),
            )
        }
    };
    let len = d * d * c;
    let filters = (0..k * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let biases = (0..spec.num_biases()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let bank = PrimaryFilterBank::new(&spec, filters, biases).unwrap();
    let masks = match (spec.variant, &oracle) {
        (Variant::Standard, _) => None,
        (Variant::Spatial, _) => Some(versatile_core::masks::spatial_masks(d, c).unwrap()),
        (Variant::Channel, _) => Some(versatile_core::masks::channel_windows(d, c, spec.chat, spec.g).unwrap()),
        (Variant::Learnable, Some(o)) => Some(mask_set(spec.mask_layout().unwrap(), &o.bits)),
        _ => unreachable!(),
    };
    let x = Tensor::random_uniform(&[h, w, c], -1.0, 1.0, rng);
    Instance {
        spec,
        bank,
        masks,
        oracle,
        x,
    }
}

/// Explicitly masked secondary filter `f_i ∘ m`, as a `d x d x c` tensor.
pub fn masked_filter(inst: &Instance, i: usize, j: usize) -> Tensor<f64> {
    let (d, c) = (inst.spec.d, inst.spec.c);
    let f = inst.bank.filter(i);
    let data = match &inst.oracle {
        None => f.to_vec(),
        Some(o) => {
            let bits = &o.bits[o.column(i, j)];
            f.iter().zip(bits).map(|(&v, &b)| if b { v } else { 0.0 }).collect()
        }
    };
    Tensor::new(vec![d, d, c], data).unwrap()
}

/// The oracle output: `conv_reference` on every explicitly masked filter,
/// stacked i-major into `H' x W' x n`.
pub fn oracle_forward(inst: &Instance) -> Tensor<f64> {
    let spec = &inst.spec;
    let per = spec.masks_per_filter();
    let n = spec.outputs();
    let maps: Vec<Tensor<f64>> = (0..spec.k)
        .flat_map(|i| (0..per).map(move |j| (i, j)))
        .map(|(i, j)| {
            let bias = inst.bank.biases.get(i * per + j).copied().unwrap_or(0.0);
            conv_reference(&inst.x, &masked_filter(inst, i, j), spec.stride, spec.padding, bias).unwrap()
        })
        .collect();
    let (oh, ow) = (maps[0].shape()[0], maps[0].shape()[1]);
    Tensor::from_fn(&[oh, ow, n], |idx| maps[idx % n].data()[idx / n])
}

/// Largest absolute entrywise difference; infinite on a shape mismatch.
pub fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
