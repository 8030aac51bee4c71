//! Small sequential CNNs built from versatile convolutions.

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accounting::{network_counts, NetLayer, NetworkSpec};
use crate::error::{Error, Result};
use crate::fastinfer::OpCounts;
use crate::masks::{self, AgentState, MaskSet, MaskSharing};
use crate::tensor::{dot, im2col, output_extent, PatchMatrix, Real, Tensor};
use crate::vconv::{self, LayerSpec, PrimaryFilterBank, Strategy, Variant};

/// A convolution layer with its filters, masks and (for trained masks) agent state.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub spec: LayerSpec,
    pub bank: PrimaryFilterBank<T>,
    pub masks: Option<MaskSet>,
    /// Present only while the masks are being learned.
    pub agent: Option<AgentState<T>>,
}

impl<T: Real> ConvLayer<T> {
    /// Fresh layer: He-uniform filters, and masks fixed by the variant
    /// (learned masks start from a uniform agent state).
    pub fn init(spec: LayerSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let bank = PrimaryFilterBank::init(&spec, rng);
        let mask_seed: u64 = rng.gen();
        let (masks, agent) = match (spec.variant, spec.strategy) {
            (Variant::Standard, _) => (None, None),
            (Variant::Spatial, _) => (Some(masks::spatial_masks(spec.d, spec.c)?), None),
            (Variant::Channel, _) => (Some(masks::channel_windows(spec.d, spec.c, spec.chat, spec.g)?), None),
            (Variant::Learnable, Strategy::RandomFixed) => (
                Some(masks::random_masks(spec.d, spec.c, spec.s, spec.k, 0.5, mask_seed)?),
                None,
            ),
            (Variant::Learnable, strategy) => {
                let sharing = if strategy == Strategy::Shared {
                    MaskSharing::Shared
                } else {
                    MaskSharing::Separate
                };
                let (agent, m) = masks::init_learnable(spec.k, spec.s, spec.d, spec.c, sharing, mask_seed)?;
                (Some(m), Some(agent))
            }
        };
        Self::new(spec, bank, masks, agent)
    }

    pub fn new(
        spec: LayerSpec,
        bank: PrimaryFilterBank<T>,
        masks: Option<MaskSet>,
        agent: Option<AgentState<T>>,
    ) -> Result<Self> {
        vconv::secondary_filters(&spec, &bank, masks.as_ref())?;
        if let Some(a) = &agent {
            if !spec.trains_masks() {
                return Err(Error::invalid("agent state on a layer whose masks are not learned"));
            }
            if Some(a.layout()) != masks.as_ref().map(|m| m.layout()) {
                return Err(Error::shape("agent layout does not match masks"));
            }
        }
        Ok(Self { spec, bank, masks, agent })
    }

    /// Stops mask learning; the current binary masks stay fixed.
    pub fn freeze_masks(&mut self) {
        self.agent = None;
    }

    pub fn secondary(&self) -> Result<Tensor<T>> {
        vconv::secondary_filters(&self.spec, &self.bank, self.masks.as_ref())
    }
}

/// Fully connected layer, `outputs x inputs` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub biases: Vec<T>,
}

impl<T: Real> DenseLayer<T> {
    pub fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs)
                .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                .collect(),
            biases: vec![T::zero(); outputs],
        }
    }

    fn forward(&self, x: &[T]) -> Vec<T> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.biases)
            .map(|(w, &b)| dot(w, x) + b)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv(ConvLayer<T>),
    Relu,
    /// 2x2 max pooling with stride 2; odd edges are dropped.
    MaxPool2,
    Dense(DenseLayer<T>),
}

/// Architecture choices for [`Model::build`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub strategy: Strategy,
    pub s: usize,
    pub chat: usize,
    pub g: usize,
    /// Output feature maps of each conv block.
    pub widths: Vec<usize>,
    pub kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Learnable,
            strategy: Strategy::Separate,
            s: 2,
            chat: 8,
            g: 8,
            widths: vec![16, 32],
            kernel: 3,
        }
    }
}

impl ModelConfig {
    pub fn standard() -> Self {
        Self {
            variant: Variant::Standard,
            ..Self::default()
        }
    }

    /// Spec of a conv block reading `c` channels and producing `n`.
    /// Channel windows only apply when the input has more than `chat` channels.
    pub fn layer_spec(&self, c: usize, n: usize) -> Result<LayerSpec> {
        let d = self.kernel;
        let pad = d / 2;
        let divide = |per: usize| -> Result<usize> {
            if per == 0 || n % per != 0 {
                return Err(Error::invalid(format!(
                    "{n} feature maps are not a multiple of {per} secondary filters per primary"
                )));
            }
            Ok(n / per)
        };
        let spec = match self.variant {
            Variant::Standard => LayerSpec::standard(d, c, n, 1, pad),
            Variant::Spatial => LayerSpec::spatial(d, c, divide(d.div_ceil(2))?, 1, pad),
            Variant::Channel => {
                let (chat, g) = if c > self.chat { (self.chat, self.g) } else { (c, 1) };
                let windows = masks::window_count(c, chat, g)?;
                LayerSpec::channel(d, c, divide(windows)?, chat, g, 1, pad)
            }
            Variant::Learnable => LayerSpec::learnable(d, c, divide(self.s)?, self.s, self.strategy, 1, pad),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Sequential network over `h x w x c` inputs producing `classes` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub layers: Vec<Layer<T>>,
}

/// Per-sample intermediate values kept for the backward pass.
pub(crate) enum Cache<T> {
    Conv(PatchMatrix<T>),
    Relu(Vec<bool>),
    Pool { argmax: Vec<usize>, input_len: usize },
    Dense(Vec<T>),
}

/// Gradients of one layer's parameters. Conv layers hold gradients of the
/// secondary filters, folded onto primaries and masks once per batch.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrad<T> {
    Conv { secondary: Vec<T>, biases: Vec<T> },
    Dense { weights: Vec<T>, biases: Vec<T> },
    None,
}

impl<T: Real> LayerGrad<T> {
    pub(crate) fn add_assign(&mut self, other: &Self) {
        let add = |a: &mut Vec<T>, b: &Vec<T>| a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        match (self, other) {
            (LayerGrad::Conv { secondary, biases }, LayerGrad::Conv { secondary: s2, biases: b2 })
            | (LayerGrad::Dense { weights: secondary, biases }, LayerGrad::Dense { weights: s2, biases: b2 }) => {
                add(secondary, s2);
                add(biases, b2);
            }
            (LayerGrad::None, LayerGrad::None) => {}
            _ => unreachable!("gradients of different models"),
        }
    }

    pub(crate) fn scale(&mut self, f: T) {
        let (a, b) = match self {
            LayerGrad::Conv { secondary, biases } => (secondary, biases),
            LayerGrad::Dense { weights, biases } => (weights, biases),
            LayerGrad::None => return,
        };
        a.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= f);
    }
}

/// Secondary filters of every conv layer, computed once per batch.
pub struct Prepared<T> {
    secondary: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Model<T> {
    /// Checks that consecutive layers fit together and ends in `classes` logits.
    pub fn new(input: (usize, usize, usize), classes: usize, layers: Vec<Layer<T>>) -> Result<Self> {
        let model = Self { input, classes, layers };
        let out = model.shapes()?.last().copied().unwrap_or(input);
        if out != (1, 1, classes) {
            return Err(Error::shape(format!(
                "network produces {out:?}, expected {classes} logits"
            )));
        }
        Ok(model)
    }

    /// Input shape of each layer followed by the output shape.
    pub fn shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut cur = self.input;
        let mut out = vec![cur];
        for layer in &self.layers {
            let (h, w, c) = cur;
            cur = match layer {
                Layer::Conv(cl) => {
                    if cl.spec.c != c {
                        return Err(Error::ChannelMismatch { expected: cl.spec.c, got: c });
                    }
                    let s = &cl.spec;
                    if h + 2 * s.padding < s.d || w + 2 * s.padding < s.d {
                        return Err(Error::shape(format!("kernel {} exceeds {h}x{w} input", s.d)));
                    }
                    (
                        output_extent(h, s.d, s.stride, s.padding),
                        output_extent(w, s.d, s.stride, s.padding),
                        s.outputs(),
                    )
                }
                Layer::Relu => cur,
                Layer::MaxPool2 => {
                    if h < 2 || w < 2 {
                        return Err(Error::shape(format!("cannot pool a {h}x{w} map")));
                    }
                    (h / 2, w / 2, c)
                }
                Layer::Dense(d) => {
                    if d.inputs != h * w * c {
                        return Err(Error::shape(format!(
                            "dense layer takes {} inputs, previous layer gives {}",
                            d.inputs,
                            h * w * c
                        )));
                    }
                    (1, 1, d.outputs)
                }
            };
            out.push(cur);
        }
        Ok(out)
    }

    /// `(conv -> relu -> pool)` per width, then a dense classifier.
    pub fn build(input: (usize, usize, usize), classes: usize, config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut h, mut w, mut c) = input;
        let mut layers = Vec::new();
        for &n in &config.widths {
            let spec = config.layer_spec(c, n)?;
            layers.push(Layer::Conv(ConvLayer::init(spec, &mut rng)?));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            h = output_extent(h, spec.d, spec.stride, spec.padding) / 2;
            w = output_extent(w, spec.d, spec.stride, spec.padding) / 2;
            c = n;
        }
        layers.push(Layer::Dense(DenseLayer::init(h * w * c, classes, &mut rng)));
        Self::new(input, classes, layers)
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &ConvLayer<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn conv_layers_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    /// Stops mask learning in every layer.
    pub fn freeze_masks(&mut self) {
        self.conv_layers_mut().for_each(ConvLayer::freeze_masks);
    }

    /// The conv layers as a shape list for the accounting module.
    pub fn conv_netspec(&self, name: &str) -> Result<NetworkSpec> {
        let shapes = self.shapes()?;
        let layers = self
            .layers
            .iter()
            .zip(&shapes)
            .enumerate()
            .filter_map(|(i, (l, &(h, w, _)))| match l {
                Layer::Conv(c) => Some((i, c, h, w)),
                _ => None,
            })
            .map(|(i, c, h, w)| {
                if h != w {
                    return Err(Error::shape("accounting needs square feature maps"));
                }
                Ok(NetLayer {
                    name: format!("conv{i}"),
                    spec: c.spec,
                    hw: h,
                })
            })
            .collect::<Result<_>>()?;
        Ok(NetworkSpec {
            name: name.into(),
            layers,
        })
    }

    /// Closed-form storage and operation counts of the conv layers.
    pub fn conv_counts(&self) -> Result<OpCounts> {
        Ok(network_counts(&self.conv_netspec("model")?)?.total)
    }

    pub fn prepare(&self) -> Result<Prepared<T>> {
        let secondary = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.secondary().map(Some),
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Prepared { secondary })
    }

    /// Logits for one `h x w x c` input.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let prep = self.prepare()?;
        self.forward_prepared(&prep, x, None)
    }

    pub(crate) fn forward_prepared(
        &self,
        prep: &Prepared<T>,
        x: &Tensor<T>,
        mut caches: Option<&mut Vec<Cache<T>>>,
    ) -> Result<Vec<T>> {
        let (h, w, c) = x.dims3()?;
        if (h, w, c) != self.input {
            return Err(Error::shape(format!("input {h}x{w}x{c}, model takes {:?}", self.input)));
        }
        let mut cur = x.clone();
        for (layer, sec) in self.layers.iter().zip(&prep.secondary) {
            let (cache, next) = match layer {
                Layer::Conv(cl) => {
                    let s = &cl.spec;
                    let patches = im2col(&cur, s.d, s.stride, s.padding)?;
                    let y = vconv::forward_patches(&patches, sec.as_ref().unwrap(), &cl.bank.biases)?;
                    (Cache::Conv(patches), y)
                }
                Layer::Relu => {
                    let active: Vec<bool> = cur.data().iter().map(|&v| v > T::zero()).collect();
                    let y = cur.map(|v| if v > T::zero() { v } else { T::zero() });
                    (Cache::Relu(active), y)
                }
                Layer::MaxPool2 => {
                    let (h, w, c) = cur.dims3()?;
                    let (oh, ow) = (h / 2, w / 2);
                    let mut argmax = Vec::with_capacity(oh * ow * c);
                    let mut out = Vec::with_capacity(oh * ow * c);
                    let data = cur.data();
                    for p in 0..oh {
                        for q in 0..ow {
                            for ch in 0..c {
                                let mut best = ((2 * p) * w + 2 * q) * c + ch;
                                for (dp, dq) in [(0, 1), (1, 0), (1, 1)] {
                                    let idx = ((2 * p + dp) * w + 2 * q + dq) * c + ch;
                                    if data[idx] > data[best] {
                                        best = idx;
                                    }
                                }
                                argmax.push(best);
                                out.push(data[best]);
                            }
                        }
                    }
                    (
                        Cache::Pool {
                            argmax,
                            input_len: data.len(),
                        },
                        Tensor::new(vec![oh, ow, c], out)?,
                    )
                }
                Layer::Dense(d) => {
                    let y = d.forward(cur.data());
                    (Cache::Dense(cur.into_data()), Tensor::new(vec![1, 1, d.outputs], y)?)
                }
            };
            if let Some(cs) = caches.as_deref_mut() {
                cs.push(cache);
            }
            cur = next;
        }
        Ok(cur.into_data())
    }

    /// Parameter gradients for one sample given `∂L/∂logits`.
    pub(crate) fn backward_prepared(
        &self,
        prep: &Prepared<T>,
        caches: Vec<Cache<T>>,
        grad_logits: Vec<T>,
    ) -> Result<Vec<LayerGrad<T>>> {
        let mut grads: Vec<LayerGrad<T>> = Vec::with_capacity(self.layers.len());
        let mut gy = Tensor::new(vec![1, 1, grad_logits.len()], grad_logits)?;
        let first_param = self
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Conv(_) | Layer::Dense(_)))
            .unwrap_or(0);
        for (idx, ((layer, sec), cache)) in self.layers.iter().zip(&prep.secondary).zip(caches).enumerate().rev() {
            let needs_input = idx > first_param;
            let (grad, gx) = match (layer, cache) {
                (Layer::Conv(cl), Cache::Conv(patches)) => {
                    let spec = &cl.spec;
                    let mut secondary = vec![T::zero(); spec.outputs() * spec.patch_len()];
                    vconv::accumulate_secondary_grads(&patches, &gy, &mut secondary)?;
                    let mut biases = vec![T::zero(); spec.num_biases()];
                    vconv::accumulate_bias_grads(&gy, &mut biases);
                    let gx = if needs_input {
                        Some(vconv::input_grad(
                            patches.geometry(),
                            sec.as_ref().unwrap(),
                            &gy,
                            spec.gradient_scale(),
                        )?)
                    } else {
                        None
                    };
                    (LayerGrad::Conv { secondary, biases }, gx)
                }
                (Layer::Relu, Cache::Relu(active)) => {
                    let mut g = gy.clone();
                    for (v, a) in g.data_mut().iter_mut().zip(active) {
                        if !a {
                            *v = T::zero();
                        }
                    }
                    (LayerGrad::None, Some(g))
                }
                (Layer::MaxPool2, Cache::Pool { argmax, input_len }) => {
                    let mut g = vec![T::zero(); input_len];
                    for (&i, &v) in argmax.iter().zip(gy.data()) {
                        g[i] += v;
                    }
                    (LayerGrad::None, Some(Tensor::new(vec![input_len], g)?))
                }
                (Layer::Dense(d), Cache::Dense(x)) => {
                    let gyv = gy.data();
                    let mut weights = vec![T::zero(); d.weights.len()];
                    for (row, &g) in weights.chunks_exact_mut(d.inputs).zip(gyv) {
                        for (w, &xv) in row.iter_mut().zip(&x) {
                            *w = g * xv;
                        }
                    }
                    let gx = needs_input.then(|| {
                        let mut gx = vec![T::zero(); d.inputs];
                        for (row, &g) in d.weights.chunks_exact(d.inputs).zip(gyv) {
                            for (a, &w) in gx.iter_mut().zip(row) {
                                *a += g * w;
                            }
                        }
                        gx
                    });
                    let gx = gx.map(|v| Tensor::new(vec![v.len()], v)).transpose()?;
                    (
                        LayerGrad::Dense {
                            weights,
                            biases: gyv.to_vec(),
                        },
                        gx,
                    )
                }
                _ => unreachable!("cache does not match layer"),
            };
            grads.push(grad);
            match gx {
                Some(g) => {
                    // reshape to this layer's input shape
                    let shape = self.input_shape_of(idx);
                    gy = g.reshape(&[shape.0, shape.1, shape.2])?;
                }
                None => {
                    grads.extend((0..idx).map(|i| self.zero_grad_kind(i)));
                    break;
                }
            }
        }
        grads.reverse();
        Ok(grads)
    }

    fn input_shape_of(&self, idx: usize) -> (usize, usize, usize) {
        self.shapes().expect("validated model")[idx]
    }

    fn zero_grad_kind(&self, idx: usize) -> LayerGrad<T> {
        match &self.layers[idx] {
            Layer::Conv(c) => LayerGrad::Conv {
                secondary: vec![T::zero(); c.spec.outputs() * c.spec.patch_len()],
                biases: vec![T::zero(); c.spec.num_biases()],
            },
            Layer::Dense(d) => LayerGrad::Dense {
                weights: vec![T::zero(); d.weights.len()],
                biases: vec![T::zero(); d.outputs],
            },
            _ => LayerGrad::None,
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect::<Vec<U>>();
        Model {
            input: self.input,
            classes: self.classes,
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv(c) => Layer::Conv(ConvLayer {
                        spec: c.spec,
                        bank: c.bank.cast(),
                        masks: c.masks.clone(),
                        agent: c.agent.as_ref().map(AgentState::cast),
                    }),
                    Layer::Relu => Layer::Relu,
                    Layer::MaxPool2 => Layer::MaxPool2,
                    Layer::Dense(d) => Layer::Dense(DenseLayer {
                        inputs: d.inputs,
                        outputs: d.outputs,
                        weights: conv(&d.weights),
                        biases: conv(&d.biases),
                    }),
                })
                .collect(),
        }
    }
}
