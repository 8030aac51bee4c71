//! Dense tensors, patch extraction and the reference convolution.
//!
//! Layout conventions, shared by every module in the crate:
//!
//! * images are `H x W x c`, row-major with the channel innermost;
//! * filters are `d x d x c` in the same order, so `vec(f)[(p * d + q) * c + ch]`
//!   is the weight at row `p`, column `q`, channel `ch`;
//! * an im2col column is `vec(x_patch)` in exactly that order, which is also
//!   the bit order of every mask in [`crate::masks`].

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

/// Scalar type for all numeric paths. `f64` is used by oracles and gradient
/// checks, `f32` by runtime training and inference.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + Debug + Display + Sum + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// Values drawn uniformly from `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(lo..hi)))
    }

    /// Small integers in `[-range, range]`; products and sums of these are exact.
    pub fn random_integers<R: Rng + ?Sized>(shape: &[usize], range: i32, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-range..=range) as f64))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(H, W, c)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::shape(format!("expected rank-3 tensor, got {:?}", self.shape))),
        }
    }

    pub fn at3(&self, h: usize, w: usize, ch: usize) -> T {
        let (_, wd, c) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(h * wd + w) * c + ch]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Channel `ch` of a rank-3 tensor as an `H x W` tensor.
    pub fn channel(&self, ch: usize) -> Result<Self> {
        let (h, w, c) = self.dims3()?;
        if ch >= c {
            return Err(Error::shape(format!("channel {ch} out of range for {c}")));
        }
        Ok(Self::from_fn(&[h, w], |i| self.data[i * c + ch]))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Geometry of one convolution: input extent, kernel size, stride, padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "kernel ({kernel}), stride ({stride}) and channels ({channels}) must be positive"
            )));
        }
        if height + 2 * padding < kernel || width + 2 * padding < kernel {
            return Err(Error::shape(format!(
                "kernel {kernel} exceeds padded input {}x{}",
                height + 2 * padding,
                width + 2 * padding
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            kernel,
            stride,
            padding,
        })
    }

    pub fn out_height(&self) -> usize {
        output_extent(self.height, self.kernel, self.stride, self.padding)
    }

    pub fn out_width(&self) -> usize {
        output_extent(self.width, self.kernel, self.stride, self.padding)
    }

    /// Number of patches `l = H' * W'`.
    pub fn num_patches(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Length of one vectorised patch, `d^2 c`.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Input coordinate read by kernel offset `k` of output index `o`, or
    /// `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// `floor((extent + 2 * padding - kernel) / stride) + 1`.
pub fn output_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (extent + 2 * padding - kernel) / stride + 1
}

/// All patches of an input, one contiguous column of length `d^2 c` per
/// output position, columns ordered row-major over `(H', W')`.
#[derive(Clone, Debug)]
pub struct PatchMatrix<T> {
    geometry: ConvGeometry,
    data: Vec<T>,
}

impl<T: Real> PatchMatrix<T> {
    pub fn geometry(&self) -> &ConvGeometry {
        &self.geometry
    }

    pub fn rows(&self) -> usize {
        self.geometry.patch_len()
    }

    pub fn num_columns(&self) -> usize {
        self.geometry.num_patches()
    }

    pub fn column(&self, p: usize) -> &[T] {
        let len = self.rows();
        &self.data[p * len..(p + 1) * len]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.rows())
    }

    /// Builds a patch matrix from explicit columns.
    pub fn from_columns(geometry: ConvGeometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geometry.patch_len() * geometry.num_patches() {
            return Err(Error::shape(format!(
                "patch matrix for {geometry:?} needs {} values, got {}",
                geometry.patch_len() * geometry.num_patches(),
                data.len()
            )));
        }
        Ok(Self { geometry, data })
    }
}

/// Extracts every `d x d x c` patch of `x` (shape `H x W x c`). Padded cells read 0.
pub fn im2col<T: Real>(x: &Tensor<T>, d: usize, stride: usize, padding: usize) -> Result<PatchMatrix<T>> {
    let (h, w, c) = x.dims3()?;
    let geometry = ConvGeometry::new(h, w, c, d, stride, padding)?;
    let (oh, ow) = (geometry.out_height(), geometry.out_width());
    let mut data = Vec::with_capacity(geometry.patch_len() * oh * ow);
    let src = x.data();
    for op in 0..oh {
        for oq in 0..ow {
            for kp in 0..d {
                let row = geometry.source(op, kp, h);
                for kq in 0..d {
                    match (row, geometry.source(oq, kq, w)) {
                        (Some(r), Some(col)) => {
                            let base = (r * w + col) * c;
                            data.extend_from_slice(&src[base..base + c]);
                        }
                        _ => data.extend(std::iter::repeat(T::zero()).take(c)),
                    }
                }
            }
        }
    }
    Ok(PatchMatrix { geometry, data })
}

/// Scatters patch-space gradients back onto the input grid (adjoint of [`im2col`]).
pub fn col2im<T: Real>(cols: &PatchMatrix<T>) -> Tensor<T> {
    let g = cols.geometry;
    let (h, w, c, d) = (g.height, g.width, g.channels, g.kernel);
    let mut out = Tensor::zeros(&[h, w, c]);
    let dst = out.data_mut();
    let ow = g.out_width();
    for (p, col) in cols.columns().enumerate() {
        let (op, oq) = (p / ow, p % ow);
        for kp in 0..d {
            let Some(r) = g.source(op, kp, h) else { continue };
            for kq in 0..d {
                let Some(cc) = g.source(oq, kq, w) else { continue };
                let base = (r * w + cc) * c;
                let off = (kp * d + kq) * c;
                for ch in 0..c {
                    dst[base + ch] += col[off + ch];
                }
            }
        }
    }
    out
}

/// Sequential dot product. The summation order (index ascending, starting
/// from zero) is the one every convolution path in the crate shares, which is
/// what makes them bit-identical.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Direct convolution by nested loops over the receptive field. This is the
/// ground-truth oracle; it shares no code with [`im2col`].
pub fn conv_reference<T: Real>(
    x: &Tensor<T>,
    f: &Tensor<T>,
    stride: usize,
    padding: usize,
    bias: T,
) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3()?;
    let (d, d2, fc) = f.dims3()?;
    if d != d2 {
        return Err(Error::shape(format!("filter must be square, got {d}x{d2}")));
    }
    if fc != c {
        return Err(Error::ChannelMismatch { expected: c, got: fc });
    }
    let g = ConvGeometry::new(h, w, c, d, stride, padding)?;
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut out = Vec::with_capacity(oh * ow);
    for op in 0..oh {
        for oq in 0..ow {
            let mut acc = T::zero();
            for kp in 0..d {
                for kq in 0..d {
                    for ch in 0..c {
                        let r = (op * stride + kp) as isize - padding as isize;
                        let cc = (oq * stride + kq) as isize - padding as isize;
                        let v = if r < 0 || cc < 0 || r as usize >= h || cc as usize >= w {
                            T::zero()
                        } else {
                            x.at3(r as usize, cc as usize, ch)
                        };
                        acc += v * f.at3(kp, kq, ch);
                    }
                }
            }
            out.push(acc + bias);
        }
    }
    Tensor::new(vec![oh, ow], out)
}

/// `Y = X^T F`: patches against a filter matrix.
///
/// `filters` has shape `[n, d^2 c]` (one vectorised filter per row, i.e. the
/// columns of the `d^2 c x n` filter matrix stored contiguously). The result
/// has shape `[H', W', n]`; channel `i` is the feature map of filter `i`.
pub fn matmul_conv<T: Real>(x: &PatchMatrix<T>, filters: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, rows) = match filters.shape() {
        [n, rows] => (*n, *rows),
        s => return Err(Error::shape(format!("filter matrix must be rank 2, got {s:?}"))),
    };
    if rows != x.rows() {
        return Err(Error::shape(format!(
            "filter rows {rows} != patch length {}",
            x.rows()
        )));
    }
    let g = x.geometry();
    let mut out = Vec::with_capacity(x.num_columns() * n);
    for col in x.columns() {
        for f in filters.data().chunks_exact(rows) {
            out.push(dot(col, f));
        }
    }
    Tensor::new(vec![g.out_height(), g.out_width(), n], out)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn conv_is_linear_in_filter(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::random_uniform(&[6, 5, 2], -1.0, 1.0, &mut rng);
            let f1 = Tensor::<f64>::random_uniform(&[3, 3, 2], -1.0, 1.0, &mut rng);
            let f2 = Tensor::<f64>::random_uniform(&[3, 3, 2], -1.0, 1.0, &mut rng);
            let comb = f1.zip_map(&f2, |u, v| a * u + b * v).unwrap();
            let lhs = conv_reference(&x, &comb, 1, 1, 0.0).unwrap();
            let y1 = conv_reference(&x, &f1, 1, 1, 0.0).unwrap();
            let y2 = conv_reference(&x, &f2, 1, 1, 0.0).unwrap();
            let rhs = y1.zip_map(&y2, |u, v| a * u + b * v).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
        }

        #[test]
        fn im2col_matmul_exact_on_integers(
            seed in 0u64..1000, h in 3usize..8, w in 3usize..8, c in 1usize..4,
            d in 1usize..4, stride in 1usize..3, padding in 0usize..2,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::random_integers(&[h, w, c], 4, &mut rng);
            let f = Tensor::<f64>::random_integers(&[d, d, c], 4, &mut rng);
            let r = conv_reference(&x, &f, stride, padding, 0.0).unwrap();
            let p = im2col(&x, d, stride, padding).unwrap();
            let m = matmul_conv(&p, &f.clone().reshape(&[1, d * d * c]).unwrap()).unwrap();
            prop_assert_eq!(m.data(), r.data());
        }
    }
}
