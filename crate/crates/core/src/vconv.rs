//! Forward and backward passes for versatile convolution layers.
//!
//! A layer stores `k` primary filters `f_i` (each `d x d x c`) and derives
//! secondary filters `f_i ∘ m` from its masks. Outputs are ordered i-major:
//! all masks of `f_1`, then all masks of `f_2`, and so on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{self, MaskKind, MaskLayout, MaskSet};
use crate::tensor::{col2im, im2col, matmul_conv, PatchMatrix, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Standard,
    Spatial,
    Channel,
    Learnable,
}

/// Mask deployment for the learnable variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Shared,
    Separate,
    /// Separate layout, Bernoulli(1/2) masks frozen at initialisation.
    RandomFixed,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "standard" => Variant::Standard,
            "spatial" => Variant::Spatial,
            "channel" => Variant::Channel,
            "learnable" => Variant::Learnable,
            _ => return Err(Error::invalid(format!("unknown variant `{s}`"))),
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "shared" => Strategy::Shared,
            "separate" => Strategy::Separate,
            "random-fixed" => Strategy::RandomFixed,
            _ => return Err(Error::invalid(format!("unknown strategy `{s}`"))),
        })
    }
}

/// Configuration of one versatile convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub variant: Variant,
    pub strategy: Strategy,
    pub d: usize,
    pub c: usize,
    /// Number of primary filters.
    pub k: usize,
    /// Masks per primary filter for the learnable variant.
    pub s: usize,
    pub chat: usize,
    pub g: usize,
    pub stride: usize,
    pub padding: usize,
    /// Orthogonality weight.
    pub lambda: f64,
}

impl LayerSpec {
    pub fn standard(d: usize, c: usize, n: usize, stride: usize, padding: usize) -> Self {
        Self {
            variant: Variant::Standard,
            strategy: Strategy::Shared,
            d,
            c,
            k: n,
            s: 1,
            chat: c,
            g: 1,
            stride,
            padding,
            lambda: 0.0,
        }
    }

    pub fn spatial(d: usize, c: usize, k: usize, stride: usize, padding: usize) -> Self {
        Self {
            variant: Variant::Spatial,
            s: d.div_ceil(2),
            ..Self::standard(d, c, k, stride, padding)
        }
    }

    pub fn channel(d: usize, c: usize, k: usize, chat: usize, g: usize, stride: usize, padding: usize) -> Self {
        Self {
            variant: Variant::Channel,
            chat,
            g,
            ..Self::standard(d, c, k, stride, padding)
        }
    }

    pub fn learnable(
        d: usize,
        c: usize,
        k: usize,
        s: usize,
        strategy: Strategy,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            variant: Variant::Learnable,
            strategy,
            s,
            ..Self::standard(d, c, k, stride, padding)
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.c == 0 || self.k == 0 || self.stride == 0 {
            return Err(Error::invalid(format!(
                "d, c, k and stride must be positive: {self:?}"
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        match self.variant {
            Variant::Spatial if self.s != self.d.div_ceil(2) => Err(Error::invalid(format!(
                "spatial variant needs s = ceil(d/2) = {}, got {}",
                self.d.div_ceil(2),
                self.s
            ))),
            Variant::Channel => masks::window_count(self.c, self.chat, self.g).map(|_| ()),
            Variant::Learnable if self.s == 0 => Err(Error::invalid("learnable variant needs s >= 1")),
            _ => Ok(()),
        }
    }

    /// Secondary filters per primary filter.
    pub fn masks_per_filter(&self) -> usize {
        match self.variant {
            Variant::Standard => 1,
            Variant::Spatial => self.d.div_ceil(2),
            Variant::Channel => (self.c - self.chat) / self.g + 1,
            Variant::Learnable => self.s,
        }
    }

    /// Output channel count `n`.
    pub fn outputs(&self) -> usize {
        self.k * self.masks_per_filter()
    }

    pub fn patch_len(&self) -> usize {
        self.d * self.d * self.c
    }

    /// The channel variant carries no biases.
    pub fn has_bias(&self) -> bool {
        self.variant != Variant::Channel
    }

    pub fn num_biases(&self) -> usize {
        if self.has_bias() {
            self.outputs()
        } else {
            0
        }
    }

    pub fn mask_layout(&self) -> Option<MaskLayout> {
        let (kind, blocks) = match (self.variant, self.strategy) {
            (Variant::Standard, _) => return None,
            (Variant::Spatial, _) => (MaskKind::Spatial, 1),
            (Variant::Channel, _) => (MaskKind::ChannelWindow, 1),
            (Variant::Learnable, Strategy::Shared) => (MaskKind::LearnedShared, 1),
            (Variant::Learnable, Strategy::Separate) => (MaskKind::LearnedSeparate, self.k),
            (Variant::Learnable, Strategy::RandomFixed) => (MaskKind::RandomFixed, self.k),
        };
        Some(MaskLayout {
            kind,
            d: self.d,
            c: self.c,
            per_filter: self.masks_per_filter(),
            blocks,
        })
    }

    /// Whether masks are updated during training.
    pub fn trains_masks(&self) -> bool {
        self.variant == Variant::Learnable && self.strategy != Strategy::RandomFixed
    }

    /// Factor dividing filter and input gradients: `s` for the hand-crafted
    /// spatial variant, 1 otherwise.
    pub fn gradient_scale(&self) -> usize {
        if self.variant == Variant::Spatial {
            self.masks_per_filter()
        } else {
            1
        }
    }

    pub fn check_masks(&self, masks: Option<&MaskSet>) -> Result<()> {
        match (self.mask_layout(), masks) {
            (None, None) => Ok(()),
            (None, Some(_)) => Err(Error::invalid("standard convolution takes no masks")),
            (Some(_), None) => Err(Error::invalid(format!("{:?} variant needs masks", self.variant))),
            (Some(layout), Some(m)) => {
                let got = m.layout();
                if got.d != layout.d || got.c != layout.c {
                    return Err(Error::shape(format!(
                        "masks are {}x{}x{}, filters {}x{}x{}",
                        got.d, got.d, got.c, layout.d, layout.d, layout.c
                    )));
                }
                if got.per_filter != layout.per_filter || got.columns() != layout.columns() {
                    return Err(Error::shape(format!(
                        "strategy needs {} mask columns ({} per filter), got {} ({} per filter)",
                        layout.columns(),
                        layout.per_filter,
                        got.columns(),
                        got.per_filter
                    )));
                }
                Ok(())
            }
        }
    }
}

/// The `k` stored primary filters and one bias per secondary filter.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimaryFilterBank<T> {
    pub d: usize,
    pub c: usize,
    /// `k` vectorised filters, each `d^2 c`, stored back to back.
    pub filters: Vec<T>,
    pub biases: Vec<T>,
}

impl<T: Real> PrimaryFilterBank<T> {
    pub fn new(spec: &LayerSpec, filters: Vec<T>, biases: Vec<T>) -> Result<Self> {
        if filters.len() != spec.k * spec.patch_len() {
            return Err(Error::shape(format!(
                "{} filter values for k={} filters of {}",
                filters.len(),
                spec.k,
                spec.patch_len()
            )));
        }
        if biases.len() != spec.num_biases() {
            return Err(Error::shape(format!(
                "{} biases supplied, layer has {}",
                biases.len(),
                spec.num_biases()
            )));
        }
        if !filters.iter().chain(&biases).all(|v| v.is_finite()) {
            return Err(Error::invalid("filter bank contains non-finite values"));
        }
        Ok(Self {
            d: spec.d,
            c: spec.c,
            filters,
            biases,
        })
    }

    /// He-uniform filters, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Self {
        let bound = (6.0 / spec.patch_len() as f64).sqrt();
        let filters = (0..spec.k * spec.patch_len())
            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
            .collect();
        Self {
            d: spec.d,
            c: spec.c,
            filters,
            biases: vec![T::zero(); spec.num_biases()],
        }
    }

    pub fn k(&self) -> usize {
        self.filters.len() / self.patch_len()
    }

    pub fn patch_len(&self) -> usize {
        self.d * self.d * self.c
    }

    pub fn filter(&self, i: usize) -> &[T] {
        let len = self.patch_len();
        &self.filters[i * len..(i + 1) * len]
    }

    pub fn filter_tensor(&self, i: usize) -> Tensor<T> {
        Tensor::new(vec![self.d, self.d, self.c], self.filter(i).to_vec()).expect("filter length")
    }

    pub fn cast<U: Real>(&self) -> PrimaryFilterBank<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        PrimaryFilterBank {
            d: self.d,
            c: self.c,
            filters: conv(&self.filters),
            biases: conv(&self.biases),
        }
    }
}

fn check_bank<T: Real>(spec: &LayerSpec, bank: &PrimaryFilterBank<T>) -> Result<()> {
    spec.validate()?;
    if bank.d != spec.d || bank.c != spec.c || bank.k() != spec.k {
        return Err(Error::shape(format!(
            "bank holds {} filters of {}x{}x{}, spec wants {} of {}x{}x{}",
            bank.k(),
            bank.d,
            bank.d,
            bank.c,
            spec.k,
            spec.d,
            spec.d,
            spec.c
        )));
    }
    if bank.biases.len() != spec.num_biases() {
        return Err(Error::shape(format!(
            "bank has {} biases, spec wants {}",
            bank.biases.len(),
            spec.num_biases()
        )));
    }
    Ok(())
}

/// Every secondary filter `f_i ∘ m_(i,j)`, as an `[n, d^2 c]` matrix in i-major order.
pub fn secondary_filters<T: Real>(
    spec: &LayerSpec,
    bank: &PrimaryFilterBank<T>,
    masks: Option<&MaskSet>,
) -> Result<Tensor<T>> {
    check_bank(spec, bank)?;
    spec.check_masks(masks)?;
    let len = spec.patch_len();
    let Some(m) = masks else {
        return Tensor::new(vec![spec.k, len], bank.filters.clone());
    };
    let layout = *m.layout();
    let per = layout.per_filter;
    let mut out = vec![T::zero(); spec.k * per * len];
    for i in 0..spec.k {
        let f = bank.filter(i);
        for j in 0..per {
            let dst = &mut out[(i * per + j) * len..(i * per + j + 1) * len];
            for idx in m.iter_ones(layout.column_for(i, j)) {
                dst[idx] = f[idx];
            }
        }
    }
    Tensor::new(vec![spec.k * per, len], out)
}

/// Convolution of precomputed patches with a secondary filter matrix, plus biases.
pub fn forward_patches<T: Real>(patches: &PatchMatrix<T>, secondary: &Tensor<T>, biases: &[T]) -> Result<Tensor<T>> {
    let mut y = matmul_conv(patches, secondary)?;
    let n = secondary.shape()[0];
    if !biases.is_empty() {
        if biases.len() != n {
            return Err(Error::shape(format!("{} biases for {n} outputs", biases.len())));
        }
        for row in y.data_mut().chunks_exact_mut(n) {
            for (v, &b) in row.iter_mut().zip(biases) {
                *v += b;
            }
        }
    }
    Ok(y)
}

/// Forward pass of any variant: `H' x W' x n`.
pub fn forward<T: Real>(
    x: &Tensor<T>,
    bank: &PrimaryFilterBank<T>,
    masks: Option<&MaskSet>,
    spec: &LayerSpec,
) -> Result<Tensor<T>> {
    let (_, _, c) = x.dims3()?;
    if c != spec.c {
        return Err(Error::ChannelMismatch { expected: spec.c, got: c });
    }
    let sec = secondary_filters(spec, bank, masks)?;
    let patches = im2col(x, spec.d, spec.stride, spec.padding)?;
    forward_patches(&patches, &sec, &bank.biases)
}

/// Spatial versatile filter: one output channel per nested scale,
/// `(M_i ∘ f) * x + b_i`, all sharing stride and padding.
pub fn spatial_forward<T: Real>(
    x: &Tensor<T>,
    f: &Tensor<T>,
    biases: &[T],
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (d, _, c) = f.dims3()?;
    let spec = LayerSpec::spatial(d, c, 1, stride, padding);
    let bank = PrimaryFilterBank::new(&spec, f.data().to_vec(), biases.to_vec())?;
    let m = masks::spatial_masks(d, c)?;
    forward(x, &bank, Some(&m), &spec)
}

/// Sum of all scale responses plus one bias: `Σ_i (M_i ∘ f) * x + b`.
pub fn naive_sum_forward<T: Real>(
    x: &Tensor<T>,
    f: &Tensor<T>,
    bias: T,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (d, _, _) = f.dims3()?;
    let s = d.div_ceil(2);
    let y = spatial_forward(x, f, &vec![T::zero(); s], stride, padding)?;
    let (oh, ow, _) = y.dims3()?;
    let out = y
        .data()
        .chunks_exact(s)
        .map(|scales| scales.iter().fold(T::zero(), |acc, &v| acc + v) + bias)
        .collect();
    Tensor::new(vec![oh, ow], out)
}

/// Channel versatile filter: one output per channel window of `f`, no bias.
pub fn channel_forward<T: Real>(x: &Tensor<T>, f: &Tensor<T>, spec: &LayerSpec) -> Result<Tensor<T>> {
    if spec.variant != Variant::Channel || spec.k != 1 {
        return Err(Error::invalid("channel_forward takes a single-filter channel spec"));
    }
    let bank = PrimaryFilterBank::new(spec, f.data().to_vec(), Vec::new())?;
    let m = masks::channel_windows(spec.d, spec.c, spec.chat, spec.g)?;
    forward(x, &bank, Some(&m), spec)
}

/// Learnable (or random-fixed) masks, shared or separate.
pub fn learnable_forward<T: Real>(
    x: &Tensor<T>,
    bank: &PrimaryFilterBank<T>,
    masks: &MaskSet,
    spec: &LayerSpec,
) -> Result<Tensor<T>> {
    if spec.variant != Variant::Learnable {
        return Err(Error::invalid("learnable_forward needs a learnable spec"));
    }
    forward(x, bank, Some(masks), spec)
}

/// Gradients of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<T> {
    /// `k x d^2 c`, like [`PrimaryFilterBank::filters`].
    pub filters: Vec<T>,
    pub biases: Vec<T>,
    /// Real-relaxed mask gradient, column-major like [`MaskSet::to_real`].
    pub masks: Option<Vec<T>>,
    pub input: Tensor<T>,
}

/// `∂L/∂f̂` for every secondary filter, `[n, d^2 c]`, accumulated into `acc`.
pub fn accumulate_secondary_grads<T: Real>(patches: &PatchMatrix<T>, grad_y: &Tensor<T>, acc: &mut [T]) -> Result<()> {
    let len = patches.rows();
    let n = acc.len() / len;
    if grad_y.len() != patches.num_columns() * n {
        return Err(Error::shape(format!(
            "output gradient has {} values, expected {} x {n}",
            grad_y.len(),
            patches.num_columns()
        )));
    }
    for (col, gy) in patches.columns().zip(grad_y.data().chunks_exact(n)) {
        for (o, &g) in gy.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            for (a, &v) in acc[o * len..(o + 1) * len].iter_mut().zip(col) {
                *a += g * v;
            }
        }
    }
    Ok(())
}

/// Bias gradients: per-channel sums of `grad_y`, accumulated into `acc`.
pub fn accumulate_bias_grads<T: Real>(grad_y: &Tensor<T>, acc: &mut [T]) {
    let n = acc.len();
    if n == 0 {
        return;
    }
    for gy in grad_y.data().chunks_exact(n) {
        for (a, &g) in acc.iter_mut().zip(gy) {
            *a += g;
        }
    }
}

/// `∂L/∂x` through all secondary filters, scaled by `1/scale`.
pub fn input_grad<T: Real>(
    patches_geometry: &crate::tensor::ConvGeometry,
    secondary: &Tensor<T>,
    grad_y: &Tensor<T>,
    scale: usize,
) -> Result<Tensor<T>> {
    let len = patches_geometry.patch_len();
    let n = secondary.shape()[0];
    let l = patches_geometry.num_patches();
    if grad_y.len() != l * n {
        return Err(Error::shape("output gradient does not match layer output"));
    }
    let mut cols = vec![T::zero(); l * len];
    for (dst, gy) in cols.chunks_exact_mut(len).zip(grad_y.data().chunks_exact(n)) {
        for (f, &g) in secondary.data().chunks_exact(len).zip(gy) {
            if g == T::zero() {
                continue;
            }
            for (a, &w) in dst.iter_mut().zip(f) {
                *a += g * w;
            }
        }
    }
    if scale > 1 {
        let inv = T::one() / T::from_usize(scale).unwrap();
        cols.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(col2im(&PatchMatrix::from_columns(*patches_geometry, cols)?))
}

/// Folds secondary-filter gradients onto primary filters and masks:
/// `∂L/∂f_i = Σ_j ∂L/∂f̂_ij ∘ m_(i,j)` and `∂L/∂m = Σ_i ∂L/∂f̂_ij ∘ f_i`
/// (shared) or `∂L/∂f̂_ij ∘ f_i` (separate). Filter gradients of the spatial
/// variant are divided by `s`.
pub fn fold_secondary_grads<T: Real>(
    spec: &LayerSpec,
    bank: &PrimaryFilterBank<T>,
    masks: Option<&MaskSet>,
    grad_sec: &[T],
) -> Result<(Vec<T>, Option<Vec<T>>)> {
    let len = spec.patch_len();
    if grad_sec.len() != spec.outputs() * len {
        return Err(Error::shape("secondary gradient does not match layer"));
    }
    let Some(m) = masks else {
        return Ok((grad_sec.to_vec(), None));
    };
    let layout = *m.layout();
    let per = layout.per_filter;
    let mut grad_f = vec![T::zero(); spec.k * len];
    let mut grad_m = vec![T::zero(); layout.columns() * len];
    for i in 0..spec.k {
        let f = bank.filter(i);
        for j in 0..per {
            let col = layout.column_for(i, j);
            let gs = &grad_sec[(i * per + j) * len..(i * per + j + 1) * len];
            let gf = &mut grad_f[i * len..(i + 1) * len];
            for idx in m.iter_ones(col) {
                gf[idx] += gs[idx];
            }
            let gm = &mut grad_m[col * len..(col + 1) * len];
            for ((a, &g), &w) in gm.iter_mut().zip(gs).zip(f) {
                *a += g * w;
            }
        }
    }
    let scale = spec.gradient_scale();
    if scale > 1 {
        let inv = T::one() / T::from_usize(scale).unwrap();
        grad_f.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((grad_f, Some(grad_m)))
}

/// Backward pass of one layer for one input.
pub fn backward<T: Real>(
    grad_y: &Tensor<T>,
    x: &Tensor<T>,
    bank: &PrimaryFilterBank<T>,
    masks: Option<&MaskSet>,
    spec: &LayerSpec,
) -> Result<LayerGrads<T>> {
    let sec = secondary_filters(spec, bank, masks)?;
    let patches = im2col(x, spec.d, spec.stride, spec.padding)?;
    let g = patches.geometry();
    let expected = [g.out_height(), g.out_width(), spec.outputs()];
    if grad_y.shape() != expected {
        return Err(Error::shape(format!(
            "output gradient {:?}, expected {expected:?}",
            grad_y.shape()
        )));
    }
    let mut grad_sec = vec![T::zero(); spec.outputs() * spec.patch_len()];
    accumulate_secondary_grads(&patches, grad_y, &mut grad_sec)?;
    let mut biases = vec![T::zero(); spec.num_biases()];
    accumulate_bias_grads(grad_y, &mut biases);
    let (filters, mask_grad) = fold_secondary_grads(spec, bank, masks, &grad_sec)?;
    let input = input_grad(g, &sec, grad_y, spec.gradient_scale())?;
    Ok(LayerGrads {
        filters,
        biases,
        masks: mask_grad,
        input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{init_learnable, spatial_masks, MaskSharing};
    use crate::tensor::conv_reference;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn spatial_three_by_three_on_ones() {
        let x = Tensor::<f64>::filled(&[3, 3, 1], 1.0);
        let f = Tensor::filled(&[3, 3, 1], 1.0);
        let y = spatial_forward(&x, &f, &[0.0, 0.0], 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2]);
        assert_eq!(y.data(), &[9.0, 1.0]);
    }

    #[test]
    fn spatial_unit_kernel_is_standard() {
        let mut r = rng(4);
        let x = Tensor::<f64>::random_uniform(&[4, 5, 3], -1.0, 1.0, &mut r);
        let f = Tensor::<f64>::random_uniform(&[1, 1, 3], -1.0, 1.0, &mut r);
        let y = spatial_forward(&x, &f, &[0.5], 1, 0).unwrap();
        let reference = conv_reference(&x, &f, 1, 0, 0.5).unwrap();
        assert_eq!(y.data(), reference.data());
    }

    #[test]
    fn spatial_zero_filter_gives_biases() {
        let x = Tensor::<f64>::filled(&[5, 5, 2], 3.0);
        let f = Tensor::zeros(&[5, 5, 2]);
        let y = spatial_forward(&x, &f, &[1.0, 2.0, 3.0], 1, 2).unwrap();
        for px in y.data().chunks_exact(3) {
            assert_eq!(px, &[1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn spatial_bias_count_checked() {
        let x = Tensor::<f64>::zeros(&[3, 3, 1]);
        let f = Tensor::zeros(&[3, 3, 1]);
        assert!(spatial_forward(&x, &f, &[0.0], 1, 0).is_err());
    }

    #[test]
    fn naive_sum_on_ones_weights_center_twice() {
        let x = Tensor::<f64>::filled(&[3, 3, 1], 1.0);
        let f = Tensor::filled(&[3, 3, 1], 1.0);
        let y = naive_sum_forward(&x, &f, 0.0, 1, 0).unwrap();
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn naive_sum_unit_kernel_is_standard() {
        let mut r = rng(5);
        let x = Tensor::<f64>::random_uniform(&[4, 4, 2], -1.0, 1.0, &mut r);
        let f = Tensor::<f64>::random_uniform(&[1, 1, 2], -1.0, 1.0, &mut r);
        let y = naive_sum_forward(&x, &f, 0.1, 1, 0).unwrap();
        assert_eq!(y.data(), conv_reference(&x, &f, 1, 0, 0.1).unwrap().data());
    }

    #[test]
    fn channel_window_sums_by_hand() {
        let x = Tensor::new(vec![1, 1, 4], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let f = Tensor::filled(&[1, 1, 4], 1.0);
        let spec = LayerSpec::channel(1, 4, 1, 2, 2, 1, 0);
        let y = channel_forward(&x, &f, &spec).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn channel_full_window_is_standard() {
        let mut r = rng(6);
        let x = Tensor::<f64>::random_uniform(&[5, 5, 4], -1.0, 1.0, &mut r);
        let f = Tensor::<f64>::random_uniform(&[3, 3, 4], -1.0, 1.0, &mut r);
        let spec = LayerSpec::channel(3, 4, 1, 4, 3, 1, 1);
        let y = channel_forward(&x, &f, &spec).unwrap();
        assert_eq!(y.shape(), &[5, 5, 1]);
        assert_eq!(y.data(), conv_reference(&x, &f, 1, 1, 0.0).unwrap().data());
    }

    #[test]
    fn channel_halves_filter_count() {
        let spec = LayerSpec::channel(3, 16, 8, 8, 8, 1, 1);
        assert_eq!(spec.masks_per_filter(), 2);
        assert_eq!(spec.outputs(), 16);
        assert!(LayerSpec::channel(3, 16, 8, 8, 3, 1, 1).validate().is_err());
    }

    #[test]
    fn learnable_all_ones_shared_duplicates_maps() {
        let mut r = rng(7);
        let spec = LayerSpec::learnable(3, 2, 2, 3, Strategy::Shared, 1, 1);
        let bank = PrimaryFilterBank::<f64>::init(&spec, &mut r);
        let m = MaskSet::all_ones(spec.mask_layout().unwrap()).unwrap();
        let x = Tensor::<f64>::random_uniform(&[4, 4, 2], -1.0, 1.0, &mut r);
        let y = learnable_forward(&x, &bank, &m, &spec).unwrap();
        for px in y.data().chunks_exact(6) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
            assert_eq!(px[3], px[5]);
        }
    }

    #[test]
    fn learnable_single_full_mask_is_standard() {
        let mut r = rng(8);
        let spec = LayerSpec::learnable(3, 2, 1, 1, Strategy::Separate, 2, 1);
        let mut bank = PrimaryFilterBank::<f64>::init(&spec, &mut r);
        bank.biases[0] = -0.3;
        let m = MaskSet::all_ones(spec.mask_layout().unwrap()).unwrap();
        let x = Tensor::<f64>::random_uniform(&[6, 5, 2], -1.0, 1.0, &mut r);
        let y = learnable_forward(&x, &bank, &m, &spec).unwrap();
        let reference = conv_reference(&x, &bank.filter_tensor(0), 2, 1, -0.3).unwrap();
        assert_eq!(y.data(), reference.data());
    }

    #[test]
    fn separate_with_spatial_masks_matches_spatial_forward() {
        let mut r = rng(9);
        let (d, c, k) = (5, 2, 3);
        let spec = LayerSpec::learnable(d, c, k, 3, Strategy::Separate, 1, 2);
        let bank = PrimaryFilterBank::<f64>::init(&spec, &mut r);
        let sp = spatial_masks(d, c).unwrap();
        let layout = spec.mask_layout().unwrap();
        let m = MaskSet::from_fn(layout, |col, idx| sp.get(col % 3, idx)).unwrap();
        let x = Tensor::<f64>::random_uniform(&[6, 6, c], -1.0, 1.0, &mut r);
        let y = learnable_forward(&x, &bank, &m, &spec).unwrap();
        for i in 0..k {
            let yi = spatial_forward(&x, &bank.filter_tensor(i), &[0.0; 3], 1, 2).unwrap();
            for (px, pi) in y.data().chunks_exact(9).zip(yi.data().chunks_exact(3)) {
                assert_eq!(&px[i * 3..i * 3 + 3], pi);
            }
        }
    }

    #[test]
    fn strategy_column_mismatch_rejected() {
        let mut r = rng(10);
        let spec = LayerSpec::learnable(3, 1, 2, 2, Strategy::Separate, 1, 0);
        let bank = PrimaryFilterBank::<f64>::init(&spec, &mut r);
        let (_, shared) = init_learnable::<f64>(2, 2, 3, 1, MaskSharing::Shared, 0).unwrap();
        let x = Tensor::<f64>::zeros(&[3, 3, 1]);
        assert!(learnable_forward(&x, &bank, &shared, &spec).is_err());
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut r = rng(11);
        let spec = LayerSpec::learnable(3, 2, 2, 2, Strategy::Shared, 1, 1);
        let bank = PrimaryFilterBank::<f64>::init(&spec, &mut r);
        let (_, m) = init_learnable::<f64>(2, 2, 3, 2, MaskSharing::Shared, 1).unwrap();
        let x = Tensor::<f64>::random_uniform(&[4, 4, 2], -1.0, 1.0, &mut r);
        let gy = Tensor::zeros(&[4, 4, 4]);
        let g = backward(&gy, &x, &bank, Some(&m), &spec).unwrap();
        assert!(g.filters.iter().all(|&v| v == 0.0));
        assert!(g.biases.iter().all(|&v| v == 0.0));
        assert!(g.masks.unwrap().iter().all(|&v| v == 0.0));
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_ones_shared_filter_grad_is_sum_of_secondary_grads() {
        let mut r = rng(12);
        let spec = LayerSpec::learnable(3, 2, 2, 3, Strategy::Shared, 1, 1);
        let bank = PrimaryFilterBank::<f64>::init(&spec, &mut r);
        let m = MaskSet::all_ones(spec.mask_layout().unwrap()).unwrap();
        let x = Tensor::<f64>::random_uniform(&[4, 4, 2], -1.0, 1.0, &mut r);
        let gy = Tensor::<f64>::random_uniform(&[4, 4, 6], -1.0, 1.0, &mut r);
        let g = backward(&gy, &x, &bank, Some(&m), &spec).unwrap();
        let patches = im2col(&x, 3, 1, 1).unwrap();
        let mut sec = vec![0.0; 6 * 18];
        accumulate_secondary_grads(&patches, &gy, &mut sec).unwrap();
        for i in 0..2 {
            for idx in 0..18 {
                let want = (0..3).fold(0.0, |a, j| a + sec[(i * 3 + j) * 18 + idx]);
                assert_eq!(g.filters[i * 18 + idx], want);
            }
        }
    }

    #[test]
    fn spatial_gradients_are_divided_by_scale_count() {
        let mut r = rng(13);
        let spec = LayerSpec::spatial(3, 1, 1, 1, 1);
        let bank = PrimaryFilterBank::<f64>::init(&spec, &mut r);
        let m = spatial_masks(3, 1).unwrap();
        let x = Tensor::<f64>::random_uniform(&[4, 4, 1], -1.0, 1.0, &mut r);
        let gy = Tensor::<f64>::random_uniform(&[4, 4, 2], -1.0, 1.0, &mut r);
        let g = backward(&gy, &x, &bank, Some(&m), &spec).unwrap();
        let learn = LayerSpec::learnable(3, 1, 1, 2, Strategy::Shared, 1, 1);
        let lm = MaskSet::from_fn(learn.mask_layout().unwrap(), |c, i| m.get(c, i)).unwrap();
        let gl = backward(&gy, &x, &bank, Some(&lm), &learn).unwrap();
        for (a, b) in g.filters.iter().zip(&gl.filters) {
            assert!((a * 2.0 - b).abs() < 1e-15);
        }
        for (a, b) in g.input.data().iter().zip(gl.input.data()) {
            assert!((a * 2.0 - b).abs() < 1e-15);
        }
        assert_eq!(g.biases, gl.biases);
    }
}
