//! Binary masks that derive secondary filters from primary filters.
//!
//! Every mask is a bit vector over `vec(f)` (length `d^2 c`, channel
//! innermost, see [`crate::tensor`]), packed 32 bits per word: bit `b` of
//! word `w` holds vec-index `32 w + b`. A [`MaskSet`] is a `d^2 c x cols`
//! binary matrix whose columns are grouped into blocks of `s` masks; a single
//! block is shared by all primary filters, otherwise block `i` belongs to
//! primary filter `i`.

use std::io::{Read, Write};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    /// Nested centered squares, one per scale.
    Spatial,
    /// Contiguous channel windows slid with a channel stride.
    ChannelWindow,
    LearnedShared,
    LearnedSeparate,
    /// Bernoulli masks drawn once and never updated.
    RandomFixed,
}

impl MaskKind {
    /// Hand-crafted kinds whose support is a union of contiguous runs known
    /// ahead of time; they need no per-element masking at inference.
    pub fn is_structured(self) -> bool {
        matches!(self, MaskKind::Spatial | MaskKind::ChannelWindow)
    }

    pub fn is_learned(self) -> bool {
        matches!(self, MaskKind::LearnedShared | MaskKind::LearnedSeparate)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            MaskKind::Spatial => 0,
            MaskKind::ChannelWindow => 1,
            MaskKind::LearnedShared => 2,
            MaskKind::LearnedSeparate => 3,
            MaskKind::RandomFixed => 4,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => MaskKind::Spatial,
            1 => MaskKind::ChannelWindow,
            2 => MaskKind::LearnedShared,
            3 => MaskKind::LearnedSeparate,
            4 => MaskKind::RandomFixed,
            _ => return None,
        })
    }
}

/// Whether learnable masks are shared by all primary filters or owned per filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSharing {
    Shared,
    Separate,
}

/// Dimensions and grouping of a mask matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskLayout {
    pub kind: MaskKind,
    pub d: usize,
    pub c: usize,
    /// Masks per primary filter (`s`, or the window count for channel masks).
    pub per_filter: usize,
    /// 1 when shared, `k` when every primary filter owns its block.
    pub blocks: usize,
}

impl MaskLayout {
    pub fn patch_len(&self) -> usize {
        self.d * self.d * self.c
    }

    pub fn columns(&self) -> usize {
        self.per_filter * self.blocks
    }

    pub fn words_per_mask(&self) -> usize {
        self.patch_len().div_ceil(32)
    }

    /// Column holding mask `j` of primary filter `i`.
    #[inline]
    pub fn column_for(&self, i: usize, j: usize) -> usize {
        if self.blocks == 1 {
            j
        } else {
            i * self.per_filter + j
        }
    }

    fn check(&self) -> Result<()> {
        if self.d == 0 || self.c == 0 || self.per_filter == 0 || self.blocks == 0 {
            return Err(Error::invalid(format!("degenerate mask layout {self:?}")));
        }
        Ok(())
    }
}

/// Bit-packed binary mask matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    layout: MaskLayout,
    words: Vec<u32>,
}

impl MaskSet {
    pub fn zeros(layout: MaskLayout) -> Result<Self> {
        layout.check()?;
        Ok(Self {
            words: vec![0; layout.words_per_mask() * layout.columns()],
            layout,
        })
    }

    pub fn from_fn(layout: MaskLayout, mut bit: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut m = Self::zeros(layout)?;
        for col in 0..layout.columns() {
            for idx in 0..layout.patch_len() {
                if bit(col, idx) {
                    m.set(col, idx, true);
                }
            }
        }
        Ok(m)
    }

    pub fn all_ones(layout: MaskLayout) -> Result<Self> {
        Self::from_fn(layout, |_, _| true)
    }

    /// Rebuilds a mask set from packed words; bits past `d^2 c` must be clear.
    pub fn from_words(layout: MaskLayout, words: Vec<u32>) -> Result<Self> {
        layout.check()?;
        let wpm = layout.words_per_mask();
        if words.len() != wpm * layout.columns() {
            return Err(Error::shape(format!(
                "{} words for {} masks of {} words",
                words.len(),
                layout.columns(),
                wpm
            )));
        }
        let tail = layout.patch_len() % 32;
        if tail != 0 {
            let spill = !((1u32 << tail) - 1);
            if words.chunks_exact(wpm).any(|m| m[wpm - 1] & spill != 0) {
                return Err(Error::invalid("mask bits set beyond d^2 c"));
            }
        }
        Ok(Self { layout, words })
    }

    pub fn layout(&self) -> &MaskLayout {
        &self.layout
    }

    pub fn kind(&self) -> MaskKind {
        self.layout.kind
    }

    pub fn patch_len(&self) -> usize {
        self.layout.patch_len()
    }

    pub fn num_masks(&self) -> usize {
        self.layout.columns()
    }

    pub fn words(&self, col: usize) -> &[u32] {
        let wpm = self.layout.words_per_mask();
        &self.words[col * wpm..(col + 1) * wpm]
    }

    pub fn all_words(&self) -> &[u32] {
        &self.words
    }

    #[inline]
    pub fn get(&self, col: usize, idx: usize) -> bool {
        let w = self.words[col * self.layout.words_per_mask() + idx / 32];
        (w >> (idx % 32)) & 1 == 1
    }

    pub fn set(&mut self, col: usize, idx: usize, value: bool) {
        let w = &mut self.words[col * self.layout.words_per_mask() + idx / 32];
        if value {
            *w |= 1 << (idx % 32);
        } else {
            *w &= !(1 << (idx % 32));
        }
    }

    pub fn ones(&self, col: usize) -> usize {
        self.words(col).iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn total_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Fraction of set bits over the whole set.
    pub fn density(&self) -> f64 {
        self.total_ones() as f64 / (self.patch_len() * self.num_masks()) as f64
    }

    /// Set vec-indices of one mask, ascending.
    pub fn iter_ones(&self, col: usize) -> impl Iterator<Item = usize> + '_ {
        self.words(col).iter().enumerate().flat_map(|(wi, &w)| {
            let mut bits = w;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(wi * 32 + b)
            })
        })
    }

    /// Maximal runs of consecutive set bits of one mask.
    pub fn runs(&self, col: usize) -> Vec<Range<usize>> {
        let mut runs: Vec<Range<usize>> = Vec::new();
        for idx in self.iter_ones(col) {
            match runs.last_mut() {
                Some(r) if r.end == idx => r.end += 1,
                _ => runs.push(idx..idx + 1),
            }
        }
        runs
    }

    /// The mask matrix as reals, column-major (`cols` columns of `d^2 c`).
    pub fn to_real<T: Real>(&self) -> Vec<T> {
        let len = self.patch_len();
        let mut out = vec![T::zero(); len * self.num_masks()];
        for col in 0..self.num_masks() {
            for idx in self.iter_ones(col) {
                out[col * len + idx] = T::one();
            }
        }
        out
    }

    /// Mean over blocks of the mean off-diagonal `|M^T M| / d^2 c`: how much
    /// the masks of one primary filter overlap. Zero for a single-mask block.
    pub fn mean_offdiag_overlap(&self) -> f64 {
        let s = self.layout.per_filter;
        if s < 2 {
            return 0.0;
        }
        let len = self.patch_len() as f64;
        let mut total = 0.0;
        for b in 0..self.layout.blocks {
            let cols: Vec<&[u32]> = (0..s).map(|j| self.words(b * s + j)).collect();
            let mut acc = 0.0;
            for a in 0..s {
                for z in 0..s {
                    if a != z {
                        let inter: u32 = cols[a].iter().zip(cols[z]).map(|(x, y)| (x & y).count_ones()).sum();
                        acc += inter as f64 / len;
                    }
                }
            }
            total += acc / (s * (s - 1)) as f64;
        }
        total / self.layout.blocks as f64
    }
}

/// `s = ceil(d/2)` nested centered squares: mask `i` (1-based) keeps rows and
/// columns `i..=d+1-i` over all channels. For even `d` the innermost mask is
/// the centered 2x2 square.
pub fn spatial_masks(d: usize, c: usize) -> Result<MaskSet> {
    if d == 0 || c == 0 {
        return Err(Error::invalid("spatial masks need d >= 1 and c >= 1"));
    }
    let s = d.div_ceil(2);
    let layout = MaskLayout {
        kind: MaskKind::Spatial,
        d,
        c,
        per_filter: s,
        blocks: 1,
    };
    MaskSet::from_fn(layout, |col, idx| {
        let i = col + 1;
        let p = idx / (d * c) + 1;
        let q = (idx / c) % d + 1;
        (i..=d + 1 - i).contains(&p) && (i..=d + 1 - i).contains(&q)
    })
}

/// Number of channel windows, `(c - chat) / g + 1`.
pub fn window_count(c: usize, chat: usize, g: usize) -> Result<usize> {
    if chat == 0 || chat > c {
        return Err(Error::invalid(format!("window length {chat} must be in 1..={c}")));
    }
    if g == 0 {
        return Err(Error::invalid("channel stride must be positive"));
    }
    if (c - chat) % g != 0 {
        return Err(Error::WindowDivisibility { c, chat, g });
    }
    Ok((c - chat) / g + 1)
}

/// Channel windows: window `i` (0-based) selects every spatial position of
/// channels `i*g .. i*g + chat`.
pub fn channel_windows(d: usize, c: usize, chat: usize, g: usize) -> Result<MaskSet> {
    let n = window_count(c, chat, g)?;
    let layout = MaskLayout {
        kind: MaskKind::ChannelWindow,
        d,
        c,
        per_filter: n,
        blocks: 1,
    };
    MaskSet::from_fn(layout, |col, idx| {
        let ch = idx % c;
        (col * g..col * g + chat).contains(&ch)
    })
}

/// Real-valued hidden state behind learned binary masks, column-major like
/// [`MaskSet::to_real`]. Entries stay in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentState<T> {
    layout: MaskLayout,
    values: Vec<T>,
}

impl<T: Real> AgentState<T> {
    pub fn new(layout: MaskLayout, values: Vec<T>) -> Result<Self> {
        layout.check()?;
        if values.len() != layout.patch_len() * layout.columns() {
            return Err(Error::shape(format!(
                "agent state needs {} values, got {}",
                layout.patch_len() * layout.columns(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &MaskLayout {
        &self.layout
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn cast<U: Real>(&self) -> AgentState<U> {
        AgentState {
            layout: self.layout,
            values: self.values.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}

/// Draws the agent variable i.i.d. uniform on `[0, 1)` and binarises it.
/// Shared sharing allocates `s` columns, separate `k * s`.
pub fn init_learnable<T: Real>(
    k: usize,
    s: usize,
    d: usize,
    c: usize,
    sharing: MaskSharing,
    seed: u64,
) -> Result<(AgentState<T>, MaskSet)> {
    if k == 0 || s == 0 {
        return Err(Error::invalid("k and s must be positive"));
    }
    let (kind, blocks) = match sharing {
        MaskSharing::Shared => (MaskKind::LearnedShared, 1),
        MaskSharing::Separate => (MaskKind::LearnedSeparate, k),
    };
    let layout = MaskLayout {
        kind,
        d,
        c,
        per_filter: s,
        blocks,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..layout.patch_len() * layout.columns())
        .map(|_| T::from_f64_lossy(rng.gen::<f64>()))
        .collect();
    let agent = AgentState::new(layout, values)?;
    let masks = sign_binarize(&agent);
    Ok((agent, masks))
}

/// Frozen masks with each bit set independently with probability `density`.
pub fn random_masks(d: usize, c: usize, per_filter: usize, blocks: usize, density: f64, seed: u64) -> Result<MaskSet> {
    let layout = MaskLayout {
        kind: MaskKind::RandomFixed,
        d,
        c,
        per_filter,
        blocks,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MaskSet::from_fn(layout, |_, _| rng.gen_bool(density))
}

/// `M = 1` where `H > 0`, else `0`.
pub fn sign_binarize<T: Real>(agent: &AgentState<T>) -> MaskSet {
    let layout = agent.layout;
    let len = layout.patch_len();
    let mut m = MaskSet::zeros(layout).expect("agent layout was validated");
    for (col, chunk) in agent.values.chunks_exact(len).enumerate() {
        for (idx, &h) in chunk.iter().enumerate() {
            if h > T::zero() {
                m.set(col, idx, true);
            }
        }
    }
    m
}

/// Straight-through agent update: `H <- clip(M - lr * grad, 0, 1)`.
///
/// `grad` is the loss gradient w.r.t. the (real-relaxed) masks, laid out like
/// [`MaskSet::to_real`]; it is applied to `H` unchanged. The reset of `H` to the
/// current binary masks happens first, so nothing but `M` carries over from
/// the previous step.
pub fn agent_update<T: Real>(agent: &mut AgentState<T>, masks: &MaskSet, grad: &[T], lr: T) -> Result<()> {
    if masks.layout() != &agent.layout {
        return Err(Error::shape(format!(
            "mask layout {:?} does not match agent layout {:?}",
            masks.layout(),
            agent.layout
        )));
    }
    if grad.len() != agent.values.len() {
        return Err(Error::shape(format!(
            "mask gradient has {} values, expected {}",
            grad.len(),
            agent.values.len()
        )));
    }
    let len = agent.layout.patch_len();
    for (col, (h, g)) in agent
        .values
        .chunks_exact_mut(len)
        .zip(grad.chunks_exact(len))
        .enumerate()
    {
        for (idx, (hv, &gv)) in h.iter_mut().zip(g).enumerate() {
            let m = if masks.get(col, idx) { T::one() } else { T::zero() };
            *hv = (m - lr * gv).max(T::zero()).min(T::one());
        }
    }
    Ok(())
}

/// `1/2 || M^T M / rows - I ||_F^2` summed over blocks of `per_block`
/// columns of a real column-major matrix with `rows` rows.
pub fn ortho_loss_relaxed(m: &[f64], rows: usize, per_block: usize) -> f64 {
    let scale = 1.0 / rows as f64;
    let mut loss = 0.0;
    for block in m.chunks_exact(rows * per_block) {
        let gram = gram(block, rows, per_block);
        for a in 0..per_block {
            for b in 0..per_block {
                let eye = if a == b { 1.0 } else { 0.0 };
                let v = gram[a * per_block + b] * scale - eye;
                loss += 0.5 * v * v;
            }
        }
    }
    loss
}

/// Gradient of [`ortho_loss_relaxed`]:
/// `(2 / rows^2) M M^T M - (2 / rows) M` per block.
pub fn ortho_grad_relaxed(m: &[f64], rows: usize, per_block: usize) -> Vec<f64> {
    let r = rows as f64;
    let mut out = vec![0.0; m.len()];
    for (block, dst) in m.chunks_exact(rows * per_block).zip(out.chunks_exact_mut(rows * per_block)) {
        let gram = gram(block, rows, per_block);
        for b in 0..per_block {
            for row in 0..rows {
                let mut mg = 0.0;
                for a in 0..per_block {
                    mg += block[a * rows + row] * gram[a * per_block + b];
                }
                dst[b * rows + row] = 2.0 / (r * r) * mg - 2.0 / r * block[b * rows + row];
            }
        }
    }
    out
}

fn gram(block: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut g = vec![0.0; cols * cols];
    for a in 0..cols {
        for b in a..cols {
            let v: f64 = block[a * rows..(a + 1) * rows]
                .iter()
                .zip(&block[b * rows..(b + 1) * rows])
                .map(|(x, y)| x * y)
                .sum();
            g[a * cols + b] = v;
            g[b * cols + a] = v;
        }
    }
    g
}

/// Orthogonality regulariser of a mask set, summed per primary-filter block.
pub fn ortho_loss(masks: &MaskSet) -> f64 {
    ortho_loss_relaxed(&masks.to_real::<f64>(), masks.patch_len(), masks.layout.per_filter)
}

/// Gradient of [`ortho_loss`] w.r.t. the masks treated as reals, column-major.
pub fn ortho_grad(masks: &MaskSet) -> Vec<f64> {
    ortho_grad_relaxed(&masks.to_real::<f64>(), masks.patch_len(), masks.layout.per_filter)
}

/// Writes one export record per mask: `d` and `c` as little-endian `u32`,
/// then `ceil(d^2 c / 32)` little-endian words.
pub fn write_mask_records<W: Write>(masks: &MaskSet, out: &mut W) -> Result<()> {
    let l = masks.layout();
    for col in 0..masks.num_masks() {
        out.write_all(&(l.d as u32).to_le_bytes())?;
        out.write_all(&(l.c as u32).to_le_bytes())?;
        for w in masks.words(col) {
            out.write_all(&w.to_le_bytes())?;
        }
    }
    Ok(())
}

/// One decoded export record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskRecord {
    pub d: usize,
    pub c: usize,
    pub words: Vec<u32>,
}

impl MaskRecord {
    pub fn get(&self, idx: usize) -> bool {
        (self.words[idx / 32] >> (idx % 32)) & 1 == 1
    }
}

/// Reads export records until end of input.
pub fn read_mask_records<R: Read>(input: &mut R) -> Result<Vec<MaskRecord>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let word = |pos: &mut usize| -> Result<u32> {
        let b = bytes.get(*pos..*pos + 4).ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("mask record truncated at byte {pos}"),
        })?;
        *pos += 4;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };
    let mut records = Vec::new();
    while pos < bytes.len() {
        let d = word(&mut pos)? as usize;
        let c = word(&mut pos)? as usize;
        let n = (d * d * c).div_ceil(32);
        let words = (0..n).map(|_| word(&mut pos)).collect::<Result<_>>()?;
        records.push(MaskRecord { d, c, words });
    }
    Ok(records)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    proptest! {
        #[test]
        fn pack_unpack_round_trip(d in 1usize..6, c in 1usize..9, cols in 1usize..5,
                                  bits in proptest::collection::vec(any::<bool>(), 0..1200)) {
            let layout = MaskLayout { kind: MaskKind::RandomFixed, d, c, per_filter: cols, blocks: 1 };
            let len = d * d * c;
            let bit = |col: usize, idx: usize| bits.get(col * len + idx).copied().unwrap_or(false);
            let m = MaskSet::from_fn(layout, bit).unwrap();
            for col in 0..cols {
                for idx in 0..len {
                    prop_assert_eq!(m.get(col, idx), bit(col, idx));
                }
            }
            let real = m.to_real::<f64>();
            prop_assert_eq!(real.iter().filter(|&&v| v == 1.0).count(), m.total_ones());
            let mut buf = Vec::new();
            write_mask_records(&m, &mut buf).unwrap();
            let recs = read_mask_records(&mut buf.as_slice()).unwrap();
            let back = MaskSet::from_words(layout, recs.iter().flat_map(|r| r.words.clone()).collect()).unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn zero_gradient_update_is_idempotent(seed in 0u64..500, lr in 0.0f64..5.0) {
            let (mut h, m) = init_learnable::<f64>(2, 3, 3, 2, MaskSharing::Separate, seed).unwrap();
            let zeros = vec![0.0; h.values().len()];
            agent_update(&mut h, &m, &zeros, lr).unwrap();
            prop_assert_eq!(sign_binarize(&h), m);
            prop_assert!(h.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn clipped_after_any_update(seed in 0u64..500, lr in 0.0f64..5.0, scale in 0.0f64..100.0) {
            let (mut h, m) = init_learnable::<f64>(1, 2, 2, 2, MaskSharing::Shared, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let g: Vec<f64> = (0..h.values().len()).map(|_| rng.gen_range(-scale..=scale)).collect();
            agent_update(&mut h, &m, &g, lr).unwrap();
            prop_assert!(h.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
