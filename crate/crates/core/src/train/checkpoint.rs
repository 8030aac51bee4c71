//! Binary checkpoints.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! "VFLT" | version u32 | h w c classes layers: u32
//! per layer: tag u8 (0 conv, 1 relu, 2 maxpool, 3 dense)
//!   conv:  variant u8 | strategy u8 | d c k s chat g stride padding: u32 | lambda f64
//!          filters f32[k d^2 c] | biases f32[...]
//!          has_masks u8 [kind u8 | per_filter u32 | blocks u32 | mask records]
//!          has_agent u8 [f32 per mask bit]
//!   dense: inputs u32 | outputs u32 | weights f32[...] | biases f32[...]
//! ```
//!
//! Mask records are the export format of [`crate::masks::write_mask_records`].

use std::path::Path;

use crate::error::{Error, Result};
use crate::masks::{write_mask_records, AgentState, MaskKind, MaskLayout, MaskSet};
use crate::tensor::Real;
use crate::vconv::{LayerSpec, PrimaryFilterBank, Strategy, Variant};

use super::model::{ConvLayer, DenseLayer, Layer, Model};

const MAGIC: &[u8; 4] = b"VFLT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn variant_code(v: Variant) -> u8 {
    match v {
        Variant::Standard => 0,
        Variant::Spatial => 1,
        Variant::Channel => 2,
        Variant::Learnable => 3,
    }
}

fn strategy_code(s: Strategy) -> u8 {
    match s {
        Strategy::Shared => 0,
        Strategy::Separate => 1,
        Strategy::RandomFixed => 2,
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend((v as u32).to_le_bytes());
}

fn put_f32s<T: Real>(out: &mut Vec<u8>, vs: &[T]) {
    for v in vs {
        out.extend((v.to_f64_lossy() as f32).to_le_bytes());
    }
}

/// Serialises a model; values are stored as 32-bit floats.
pub fn write_checkpoint<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    let (h, w, c) = model.input;
    for v in [h, w, c, model.classes, model.layers.len()] {
        put_u32(&mut out, v);
    }
    for layer in &model.layers {
        match layer {
            Layer::Conv(cl) => {
                let s = &cl.spec;
                out.push(0);
                out.push(variant_code(s.variant));
                out.push(strategy_code(s.strategy));
                for v in [s.d, s.c, s.k, s.s, s.chat, s.g, s.stride, s.padding] {
                    put_u32(&mut out, v);
                }
                out.extend(s.lambda.to_le_bytes());
                put_f32s(&mut out, &cl.bank.filters);
                put_f32s(&mut out, &cl.bank.biases);
                match &cl.masks {
                    Some(m) => {
                        let l = m.layout();
                        out.push(1);
                        out.push(l.kind.code());
                        put_u32(&mut out, l.per_filter);
                        put_u32(&mut out, l.blocks);
                        write_mask_records(m, &mut out)?;
                    }
                    None => out.push(0),
                }
                match &cl.agent {
                    Some(a) => {
                        out.push(1);
                        put_f32s(&mut out, a.values());
                    }
                    None => out.push(0),
                }
            }
            Layer::Relu => out.push(1),
            Layer::MaxPool2 => out.push(2),
            Layer::Dense(d) => {
                out.push(3);
                put_u32(&mut out, d.inputs);
                put_u32(&mut out, d.outputs);
                put_f32s(&mut out, &d.weights);
                put_f32s(&mut out, &d.biases);
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!(
                "truncated: {what} needs {n} bytes, {} left",
                self.buf.len() - self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("size overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        let at = self.pos;
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Checkpoint {
                offset: at,
                msg: format!("{what}: expected 0 or 1, got {v}"),
            }),
        }
    }
}

fn read_conv(r: &mut Reader) -> Result<ConvLayer<f32>> {
    let start = r.pos;
    let variant = match r.u8("variant")? {
        0 => Variant::Standard,
        1 => Variant::Spatial,
        2 => Variant::Channel,
        3 => Variant::Learnable,
        v => return Err(r.err(format!("unknown variant code {v}"))),
    };
    let strategy = match r.u8("strategy")? {
        0 => Strategy::Shared,
        1 => Strategy::Separate,
        2 => Strategy::RandomFixed,
        v => return Err(r.err(format!("unknown strategy code {v}"))),
    };
    let mut f = [0usize; 8];
    for v in &mut f {
        *v = r.u32("layer spec")?;
    }
    let [d, c, k, s, chat, g, stride, padding] = f;
    let spec = LayerSpec {
        variant,
        strategy,
        d,
        c,
        k,
        s,
        chat,
        g,
        stride,
        padding,
        lambda: r.f64("lambda")?,
    };
    spec.validate().map_err(|e| Error::Checkpoint {
        offset: start,
        msg: e.to_string(),
    })?;
    let filters = r.f32s(spec.k * spec.patch_len(), "filters")?;
    let biases = r.f32s(spec.num_biases(), "biases")?;
    let bank = PrimaryFilterBank::new(&spec, filters, biases)?;
    let masks = if r.flag("mask flag")? {
        let at = r.pos;
        let kind = MaskKind::from_code(r.u8("mask kind")?).ok_or_else(|| Error::Checkpoint {
            offset: at,
            msg: "unknown mask kind".into(),
        })?;
        let layout = MaskLayout {
            kind,
            d,
            c,
            per_filter: r.u32("masks per filter")?,
            blocks: r.u32("mask blocks")?,
        };
        let wpm = (d * d * c).div_ceil(32);
        let mut words = Vec::new();
        for _ in 0..layout.columns() {
            let at = r.pos;
            let (md, mc) = (r.u32("mask d")?, r.u32("mask c")?);
            if (md, mc) != (d, c) {
                return Err(Error::Checkpoint {
                    offset: at,
                    msg: format!("mask record is {md}x{md}x{mc}, layer is {d}x{d}x{c}"),
                });
            }
            for _ in 0..wpm {
                words.push(r.u32("mask word")? as u32);
            }
        }
        Some(MaskSet::from_words(layout, words).map_err(|e| r.err(e.to_string()))?)
    } else {
        None
    };
    let agent = if r.flag("agent flag")? {
        let layout = *masks
            .as_ref()
            .ok_or_else(|| r.err("agent state without masks"))?
            .layout();
        let values = r.f32s(layout.columns() * layout.patch_len(), "agent state")?;
        Some(AgentState::new(layout, values)?)
    } else {
        None
    };
    ConvLayer::new(spec, bank, masks, agent).map_err(|e| Error::Checkpoint {
        offset: start,
        msg: e.to_string(),
    })
}

/// Parses a checkpoint produced by [`write_checkpoint`].
pub fn read_checkpoint(buf: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            msg: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u32("version")? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint {
            offset: 4,
            msg: format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        });
    }
    let input = (r.u32("height")?, r.u32("width")?, r.u32("channels")?);
    let classes = r.u32("classes")?;
    let n = r.u32("layer count")?;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let at = r.pos;
        layers.push(match r.u8("layer tag")? {
            0 => Layer::Conv(read_conv(&mut r)?),
            1 => Layer::Relu,
            2 => Layer::MaxPool2,
            3 => {
                let inputs = r.u32("dense inputs")?;
                let outputs = r.u32("dense outputs")?;
                let weights = r.f32s(inputs * outputs, "dense weights")?;
                let biases = r.f32s(outputs, "dense biases")?;
                Layer::Dense(DenseLayer {
                    inputs,
                    outputs,
                    weights,
                    biases,
                })
            }
            t => {
                return Err(Error::Checkpoint {
                    offset: at,
                    msg: format!("unknown layer tag {t}"),
                })
            }
        });
    }
    if r.pos != buf.len() {
        return Err(r.err(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Model::new(input, classes, layers).map_err(|e| Error::Checkpoint {
        offset: buf.len(),
        msg: e.to_string(),
    })
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    read_checkpoint(&std::fs::read(path)?)
}
