//! Cached-product inference kernel and exact operation counts.
//!
//! For each patch the kernel forms `c_i = vec(x) ∘ f_i` once per primary
//! filter, then reduces `c_i` under every mask of that filter. Learned and
//! random masks are applied bit by bit from their packed words (one MASK op
//! per element, no fp32 multiply). Spatial and channel masks are unions of
//! contiguous index runs known ahead of time, so the kernel sums those runs
//! directly and issues no MASK ops at all.

use std::ops::{Add, AddAssign, Range};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{self, MaskSet};
use crate::tensor::{im2col, Real, Tensor};
use crate::vconv::{self, LayerSpec, PrimaryFilterBank, Variant};

/// Operation and storage tallies for a layer or a network.
///
/// Biases are not counted; parameter totals are the filter values alone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub mul_fp32: u64,
    pub add_fp32: u64,
    pub mask_ops: u64,
    pub param_values_fp32: u64,
    pub mask_bits: u64,
}

impl OpCounts {
    /// One binary masking op weighs 1/32 of an fp32 multiplication.
    pub fn combined_mul(&self) -> f64 {
        self.mul_fp32 as f64 + self.mask_ops as f64 / 32.0
    }

    /// Storage with fp32 values at 4 bytes and masks bit-packed.
    pub fn memory_bytes(&self) -> u64 {
        4 * self.param_values_fp32 + self.mask_bits.div_ceil(8)
    }

    /// Parameters in 32-bit units: fp32 values plus mask bits / 32.
    pub fn param_equivalent(&self) -> f64 {
        self.param_values_fp32 as f64 + self.mask_bits as f64 / 32.0
    }
}

impl Add for OpCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            mul_fp32: self.mul_fp32 + o.mul_fp32,
            add_fp32: self.add_fp32 + o.add_fp32,
            mask_ops: self.mask_ops + o.mask_ops,
            param_values_fp32: self.param_values_fp32 + o.param_values_fp32,
            mask_bits: self.mask_bits + o.mask_bits,
        }
    }
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for OpCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// One machine-readable report line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    pub layer: String,
    pub params: f64,
    pub mul_fp32: u64,
    pub mask_ops: u64,
    pub combined_mul: f64,
    pub add_fp32: u64,
    pub memory_bytes: u64,
}

impl CountRecord {
    pub fn new(layer: impl Into<String>, counts: &OpCounts) -> Self {
        Self {
            layer: layer.into(),
            params: counts.param_equivalent(),
            mul_fp32: counts.mul_fp32,
            mask_ops: counts.mask_ops,
            combined_mul: counts.combined_mul(),
            add_fp32: counts.add_fp32,
            memory_bytes: counts.memory_bytes(),
        }
    }
}

enum Reduction {
    /// No masks: sum the whole cached product.
    Full,
    /// Precomputed runs per mask column.
    Runs(Vec<Vec<Range<usize>>>),
    /// Bit-by-bit over packed words.
    Bits,
}

/// Storage the layer needs: primary filter values, plus mask bits for
/// learned or random masks (structured masks follow from `d, c, chat, g`).
fn storage(spec: &LayerSpec, masks: Option<&MaskSet>) -> (u64, u64) {
    let params = (spec.k * spec.patch_len()) as u64;
    let bits = match masks {
        Some(m) if !m.kind().is_structured() => (m.num_masks() * m.patch_len()) as u64,
        _ => 0,
    };
    (params, bits)
}

/// Masked inference with cached primary-filter products.
///
/// The output equals [`vconv::forward`] bit for bit: products are formed the
/// same way and only exact zeros are skipped in the ascending-index sums.
pub fn cached_forward<T: Real>(
    x: &Tensor<T>,
    bank: &PrimaryFilterBank<T>,
    masks: Option<&MaskSet>,
    spec: &LayerSpec,
) -> Result<(Tensor<T>, OpCounts)> {
    let (_, _, c) = x.dims3()?;
    if c != spec.c {
        return Err(Error::ChannelMismatch { expected: spec.c, got: c });
    }
    // validates bank and masks against the spec
    vconv::secondary_filters(spec, bank, masks)?;
    let patches = im2col(x, spec.d, spec.stride, spec.padding)?;
    let len = spec.patch_len();
    let k = spec.k;
    let per = spec.masks_per_filter();
    let n = spec.outputs();
    let reduction = match masks {
        None => Reduction::Full,
        Some(m) if m.kind().is_structured() => Reduction::Runs((0..m.num_masks()).map(|j| m.runs(j)).collect()),
        Some(_) => Reduction::Bits,
    };
    let biases = &bank.biases;

    let rows: Vec<(Vec<T>, OpCounts)> = (0..patches.num_columns())
        .into_par_iter()
        .map(|p| {
            let col = patches.column(p);
            let mut cache = vec![T::zero(); len];
            let mut out = Vec::with_capacity(n);
            let mut counts = OpCounts::default();
            for i in 0..k {
                for ((cv, &xv), &fv) in cache.iter_mut().zip(col).zip(bank.filter(i)) {
                    *cv = xv * fv;
                }
                counts.mul_fp32 += len as u64;
                for j in 0..per {
                    let mut acc = T::zero();
                    match (&reduction, masks) {
                        (Reduction::Full, _) => {
                            for &v in &cache {
                                acc += v;
                            }
                            counts.add_fp32 += len as u64;
                        }
                        (Reduction::Runs(runs), Some(m)) => {
                            for r in &runs[m.layout().column_for(i, j)] {
                                for &v in &cache[r.clone()] {
                                    acc += v;
                                }
                                counts.add_fp32 += r.len() as u64;
                            }
                        }
                        (Reduction::Bits, Some(m)) => {
                            for (wi, &word) in m.words(m.layout().column_for(i, j)).iter().enumerate() {
                                let mut bits = word;
                                let base = wi * 32;
                                while bits != 0 {
                                    let b = bits.trailing_zeros() as usize;
                                    acc += cache[base + b];
                                    bits &= bits - 1;
                                }
                                counts.add_fp32 += word.count_ones() as u64;
                            }
                            counts.mask_ops += len as u64;
                        }
                        _ => unreachable!("reduction chosen from masks"),
                    }
                    let o = i * per + j;
                    out.push(if biases.is_empty() { acc } else { acc + biases[o] });
                }
            }
            (out, counts)
        })
        .collect();

    let g = patches.geometry();
    let mut data = Vec::with_capacity(rows.len() * n);
    let mut counts = OpCounts::default();
    for (row, cnt) in rows {
        data.extend(row);
        counts += cnt;
    }
    let (params, bits) = storage(spec, masks);
    counts.param_values_fp32 = params;
    counts.mask_bits = bits;
    Ok((Tensor::new(vec![g.out_height(), g.out_width(), n], data)?, counts))
}

/// Closed-form counts for a layer producing an `out_h x out_w` map.
///
/// fp32 MULs are `d^2 c H'W' k`. Learned and random masks add
/// `d^2 c H'W' n` MASK ops; structured masks add none. ADDs are exact for
/// standard, spatial and channel layers and the half-density expectation
/// `0.5 d^2 c H'W' n` for learned masks.
pub fn predict_counts(spec: &LayerSpec, out_h: usize, out_w: usize) -> Result<OpCounts> {
    spec.validate()?;
    let l = (out_h * out_w) as u64;
    let len = spec.patch_len() as u64;
    let k = spec.k as u64;
    let n = spec.outputs() as u64;
    let params = len * k;
    let (mask_ops, add_fp32, mask_bits) = match spec.variant {
        Variant::Standard => (0, len * l * n, 0),
        Variant::Spatial => {
            let m = masks::spatial_masks(spec.d, spec.c)?;
            let ones: u64 = (0..m.num_masks()).map(|j| m.ones(j) as u64).sum();
            (0, l * k * ones, 0)
        }
        Variant::Channel => (0, l * n * (spec.d * spec.d * spec.chat) as u64, 0),
        Variant::Learnable => {
            let layout = spec.mask_layout().expect("learnable layout");
            let bits = (layout.columns() * spec.patch_len()) as u64;
            (len * l * n, (len * l * n).div_ceil(2), bits)
        }
    };
    Ok(OpCounts {
        mul_fp32: len * l * k,
        add_fp32,
        mask_ops,
        param_values_fp32: params,
        mask_bits,
    })
}

/// Outcome of [`measure_vs_predict`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureReport {
    pub trials: usize,
    pub predicted: OpCounts,
    /// Per-trial mean of measured counts.
    pub measured_adds_mean: f64,
    pub measured: OpCounts,
    /// `(measured - predicted) / predicted` for ADDs.
    pub add_rel_error: f64,
    pub add_tolerance: f64,
}

/// Runs the kernel on random inputs and checks it against [`predict_counts`]:
/// fp32 MULs and MASK ops exactly, ADDs exactly for structured layers and
/// within ±10% for learned layers with Bernoulli(1/2) masks.
pub fn measure_vs_predict(spec: &LayerSpec, hw: (usize, usize), trials: usize, seed: u64) -> Result<MeasureReport> {
    spec.validate()?;
    if trials == 0 {
        return Err(Error::invalid("need at least one trial"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = hw;
    let mut predicted = None;
    let mut measured_adds = 0u64;
    let mut last = OpCounts::default();
    for trial in 0..trials {
        let x = Tensor::<f32>::random_uniform(&[h, w, spec.c], -1.0, 1.0, &mut rng);
        let bank = PrimaryFilterBank::<f32>::init(spec, &mut rng);
        let masks = match spec.mask_layout() {
            None => None,
            Some(layout) if layout.kind.is_structured() => Some(match spec.variant {
                Variant::Spatial => masks::spatial_masks(spec.d, spec.c)?,
                _ => masks::channel_windows(spec.d, spec.c, spec.chat, spec.g)?,
            }),
            Some(layout) => Some(MaskSet::from_fn(layout, |_, _| rng.gen_bool(0.5))?),
        };
        let (y, measured) = cached_forward(&x, &bank, masks.as_ref(), spec)?;
        let (oh, ow, _) = y.dims3()?;
        let pred = *predicted.get_or_insert(predict_counts(spec, oh, ow)?);
        for (what, m, p) in [
            ("fp32 MULs", measured.mul_fp32, pred.mul_fp32),
            ("MASK ops", measured.mask_ops, pred.mask_ops),
            ("parameter values", measured.param_values_fp32, pred.param_values_fp32),
            ("mask bits", measured.mask_bits, pred.mask_bits),
        ] {
            if m != p {
                return Err(Error::CountMismatch {
                    what: format!("trial {trial}: {what}"),
                    measured: m as f64,
                    predicted: p as f64,
                });
            }
        }
        if spec.variant != Variant::Learnable && measured.add_fp32 != pred.add_fp32 {
            return Err(Error::CountMismatch {
                what: format!("trial {trial}: ADDs"),
                measured: measured.add_fp32 as f64,
                predicted: pred.add_fp32 as f64,
            });
        }
        measured_adds += measured.add_fp32;
        last = measured;
    }
    let predicted = predicted.expect("at least one trial");
    let mean = measured_adds as f64 / trials as f64;
    let rel = if predicted.add_fp32 == 0 {
        0.0
    } else {
        (mean - predicted.add_fp32 as f64) / predicted.add_fp32 as f64
    };
    let tolerance = if spec.variant == Variant::Learnable { 0.10 } else { 0.0 };
    if rel.abs() > tolerance {
        return Err(Error::CountMismatch {
            what: "mean ADDs".into(),
            measured: mean,
            predicted: predicted.add_fp32 as f64,
        });
    }
    Ok(MeasureReport {
        trials,
        predicted,
        measured_adds_mean: mean,
        measured: last,
        add_rel_error: rel,
        add_tolerance: tolerance,
    })
}
