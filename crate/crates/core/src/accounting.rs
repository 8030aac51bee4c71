//! Network-level parameter and operation accounting from shape lists.
//!
//! Shape lists use a line-based format:
//!
//! ```text
//! # comment
//! network resnet56-baseline
//! layer conv1 d=3 c=3 n=16 variant=standard s=1 chat=3 g=1 stride=1 pad=1 hw=32
//! ```
//!
//! `n` is the number of output feature maps; the primary filter count is
//! derived from it (`n / s` for spatial and learnable layers, `n / windows`
//! for channel layers). `hw` is the input height (= width). Variants are
//! `standard`, `spatial`, `channel`, `shared`, `separate` and
//! `random-fixed`. Keys other than `d`, `c`, `n` and `hw` are optional.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fastinfer::{predict_counts, CountRecord, OpCounts};
use crate::masks;
use crate::tensor::output_extent;
use crate::vconv::{LayerSpec, Strategy};

/// One layer of a shape list.
#[derive(Clone, Debug, PartialEq)]
pub struct NetLayer {
    pub name: String,
    pub spec: LayerSpec,
    /// Input height and width.
    pub hw: usize,
}

impl NetLayer {
    pub fn out_hw(&self) -> usize {
        output_extent(self.hw, self.spec.d, self.spec.stride, self.spec.padding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub layers: Vec<NetLayer>,
}

/// Per-layer and total counts of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkCounts {
    pub name: String,
    pub layers: Vec<(String, OpCounts)>,
    pub total: OpCounts,
}

impl NetworkCounts {
    /// Machine-readable records: one per layer, then a `total` record.
    pub fn records(&self) -> Vec<CountRecord> {
        self.layers
            .iter()
            .map(|(name, c)| CountRecord::new(name.clone(), c))
            .chain(std::iter::once(CountRecord::new("total", &self.total)))
            .collect()
    }
}

fn parse_layer(line_no: usize, fields: &[&str]) -> Result<NetLayer> {
    let err = |msg: String| Error::Parse { line: line_no, msg };
    let name = fields
        .first()
        .filter(|f| !f.contains('='))
        .ok_or_else(|| err("layer record needs a name".into()))?
        .to_string();
    let (mut d, mut c, mut n, mut hw) = (None, None, None, None);
    let (mut variant, mut s, mut chat, mut g, mut stride, mut pad) = ("standard", None, None, 1, 1, None);
    for field in &fields[1..] {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| err(format!("expected key=value, got `{field}`")))?;
        let int = || -> Result<usize> {
            value
                .parse()
                .map_err(|_| err(format!("`{key}` needs a non-negative integer, got `{value}`")))
        };
        match key {
            "d" => d = Some(int()?),
            "c" => c = Some(int()?),
            "n" => n = Some(int()?),
            "hw" => hw = Some(int()?),
            "variant" => variant = value,
            "s" => s = Some(int()?),
            "chat" => chat = Some(int()?),
            "g" => g = int()?,
            "stride" => stride = int()?,
            "pad" => pad = Some(int()?),
            _ => return Err(err(format!("unknown key `{key}`"))),
        }
    }
    let missing = |k: &str| err(format!("layer `{name}` is missing `{k}`"));
    let d = d.ok_or_else(|| missing("d"))?;
    let c = c.ok_or_else(|| missing("c"))?;
    let n = n.ok_or_else(|| missing("n"))?;
    let hw = hw.ok_or_else(|| missing("hw"))?;
    let pad = pad.unwrap_or(d / 2);
    let chat = chat.unwrap_or(c);
    let divide = |n: usize, per: usize| -> Result<usize> {
        if per == 0 || n % per != 0 {
            return Err(err(format!("n={n} is not a multiple of {per} secondary filters per primary")));
        }
        Ok(n / per)
    };
    let spec = match variant {
        "standard" => {
            if s.is_some_and(|s| s != 1) {
                return Err(err("standard layers take s=1".into()));
            }
            LayerSpec::standard(d, c, n, stride, pad)
        }
        "spatial" => {
            let scales = d.div_ceil(2);
            if s.is_some_and(|s| s != scales) {
                return Err(err(format!("spatial layers use s = ceil(d/2) = {scales}")));
            }
            LayerSpec::spatial(d, c, divide(n, scales)?, stride, pad)
        }
        "channel" => {
            let windows = masks::window_count(c, chat, g).map_err(|e| err(e.to_string()))?;
            LayerSpec::channel(d, c, divide(n, windows)?, chat, g, stride, pad)
        }
        "shared" | "separate" | "random-fixed" => {
            let s = s.unwrap_or(1);
            let strategy: Strategy = variant.parse()?;
            LayerSpec::learnable(d, c, divide(n, s)?, s, strategy, stride, pad)
        }
        other => return Err(err(format!("unknown variant `{other}`"))),
    };
    spec.validate().map_err(|e| err(e.to_string()))?;
    if hw + 2 * pad < d {
        return Err(err(format!("kernel {d} exceeds padded input {}", hw + 2 * pad)));
    }
    Ok(NetLayer { name, spec, hw })
}

/// Parses a shape-list file into its networks. Layers before any `network`
/// line belong to a network named `unnamed`.
pub fn parse_netspec(text: &str) -> Result<Vec<NetworkSpec>> {
    let mut nets: Vec<NetworkSpec> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "network" => {
                let name = fields.get(1).ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: "network record needs a name".into(),
                })?;
                nets.push(NetworkSpec {
                    name: name.to_string(),
                    layers: Vec::new(),
                });
            }
            "layer" => {
                let layer = parse_layer(line_no, &fields[1..])?;
                if nets.is_empty() {
                    nets.push(NetworkSpec {
                        name: "unnamed".into(),
                        layers: Vec::new(),
                    });
                }
                nets.last_mut().unwrap().layers.push(layer);
            }
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unknown record `{other}`"),
                })
            }
        }
    }
    Ok(nets)
}

impl NetworkSpec {
    /// Every layer must read a channel count produced earlier in the chain:
    /// by the previous layer or, for shortcut branches, by any earlier layer
    /// or the network input.
    pub fn check_composition(&self) -> Result<()> {
        let Some(first) = self.layers.first() else {
            return Ok(());
        };
        let mut produced = vec![first.spec.c];
        for layer in &self.layers {
            if !produced.contains(&layer.spec.c) {
                return Err(Error::Shape(format!(
                    "layer `{}` reads {} channels but no earlier layer produces them (previous: {})",
                    layer.name,
                    layer.spec.c,
                    produced.last().unwrap()
                )));
            }
            produced.push(layer.spec.outputs());
        }
        Ok(())
    }
}

/// Sums closed-form layer counts over a network.
pub fn network_counts(net: &NetworkSpec) -> Result<NetworkCounts> {
    net.check_composition()?;
    let layers = net
        .layers
        .iter()
        .map(|l| {
            let o = l.out_hw();
            Ok((l.name.clone(), predict_counts(&l.spec, o, o)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let total = layers.iter().map(|(_, c)| *c).sum();
    Ok(NetworkCounts {
        name: net.name.clone(),
        layers,
        total,
    })
}

/// Side-by-side totals of two networks with `a / b` ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub a_counts: OpCounts,
    pub b_counts: OpCounts,
    pub param_ratio: f64,
    pub mul_ratio: f64,
    pub add_ratio: f64,
    pub memory_ratio: f64,
}

pub fn compare_table(a: &NetworkSpec, b: &NetworkSpec) -> Result<Comparison> {
    let ca = network_counts(a)?.total;
    let cb = network_counts(b)?.total;
    let ratio = |x: f64, y: f64| if y == 0.0 { if x == 0.0 { 1.0 } else { f64::INFINITY } } else { x / y };
    Ok(Comparison {
        a: a.name.clone(),
        b: b.name.clone(),
        a_counts: ca,
        b_counts: cb,
        param_ratio: ratio(ca.param_equivalent(), cb.param_equivalent()),
        mul_ratio: ratio(ca.combined_mul(), cb.combined_mul()),
        add_ratio: ratio(ca.add_fp32 as f64, cb.add_fp32 as f64),
        memory_ratio: ratio(ca.memory_bytes() as f64, cb.memory_bytes() as f64),
    })
}

/// `8.5x10^5`-style rendering with two significant digits.
pub fn sci(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    let mant = v / 10f64.powi(exp);
    let rounded = (mant * 10.0).round() / 10.0;
    if rounded >= 10.0 {
        format!("{:.1}x10^{}", rounded / 10.0, exp + 1)
    } else {
        format!("{rounded:.1}x10^{exp}")
    }
}

/// Aligned text table of count records.
pub fn render_records(records: &[CountRecord]) -> String {
    let header = ["layer", "params", "mul_fp32", "mask_ops", "combined_mul", "add_fp32", "memory_bytes"];
    let rows: Vec<[String; 7]> = records
        .iter()
        .map(|r| {
            [
                r.layer.clone(),
                r.params.to_string(),
                r.mul_fp32.to_string(),
                r.mask_ops.to_string(),
                r.combined_mul.to_string(),
                r.add_fp32.to_string(),
                r.memory_bytes.to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            if i == 0 {
                let _ = write!(out, "{cell:<w$}");
            } else {
                let _ = write!(out, "  {cell:>w$}");
            }
        }
        out.push('\n');
    };
    line(&mut out, &header);
    for row in &rows {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

/// Summary table: one row per network with ratios against the first.
pub fn render_summary(nets: &[NetworkCounts]) -> String {
    let mut out = format!(
        "{:<28} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8}\n",
        "model", "#Param", "#ADD", "#MUL", "Mem(MB)", "xParam", "xMUL"
    );
    let base = nets.first().map(|n| n.total);
    for n in nets {
        let t = n.total;
        let (rp, rm) = base
            .map(|b| (b.param_equivalent() / t.param_equivalent(), b.combined_mul() / t.combined_mul()))
            .unwrap_or((1.0, 1.0));
        let _ = writeln!(
            out,
            "{:<28} {:>10} {:>10} {:>10} {:>10.2} {:>8.2} {:>8.2}",
            n.name,
            sci(t.param_equivalent()),
            sci(t.add_fp32 as f64),
            sci(t.combined_mul()),
            t.memory_bytes() as f64 / (1024.0 * 1024.0),
            rp,
            rm
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(line: &str) -> NetworkSpec {
        parse_netspec(line).unwrap().remove(0)
    }

    #[test]
    fn alexnet_first_layer_primary_filters() {
        let net = one("layer conv1 d=11 c=3 n=96 variant=spatial s=6 stride=4 pad=2 hw=224");
        let spec = net.layers[0].spec;
        assert_eq!((spec.d, spec.c, spec.k), (11, 3, 16));
        let counts = network_counts(&net).unwrap();
        assert_eq!(counts.total.param_values_fp32, 11 * 11 * 3 * 16);
    }

    #[test]
    fn single_standard_layer_bytes() {
        let net = one("layer l d=3 c=64 n=64 variant=standard hw=8");
        let t = network_counts(&net).unwrap().total;
        assert_eq!(t.param_values_fp32, 36_864);
        assert_eq!(t.memory_bytes(), 147_456);
    }

    #[test]
    fn identical_specs_compare_to_one() {
        let a = one("network a\nlayer l d=3 c=8 n=16 variant=separate s=4 hw=8");
        let c = compare_table(&a, &a).unwrap();
        assert_eq!(
            (c.param_ratio, c.mul_ratio, c.add_ratio, c.memory_ratio),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn spatial_halves_parameters() {
        let base = one("layer l d=3 c=16 n=32 variant=standard hw=16");
        let sp = one("layer l d=3 c=16 n=32 variant=spatial hw=16");
        let c = compare_table(&base, &sp).unwrap();
        assert_eq!(c.param_ratio, 2.0);
    }

    #[test]
    fn shared_ratio_matches_both_closed_forms() {
        let (d, c, n, s) = (3.0, 16.0, 64.0, 4.0);
        let base = one("layer l d=3 c=16 n=64 variant=standard hw=8");
        let sh = one("layer l d=3 c=16 n=64 variant=shared s=4 hw=8");
        let r = compare_table(&base, &sh).unwrap().param_ratio;
        let closed = (d * d * c * n) / (d * d * c * n / s + d * d * c * s / 32.0);
        assert!((r - closed).abs() < 1e-12);
    }

    #[test]
    fn additive_over_concatenation() {
        let text = "network a\nlayer x d=3 c=3 n=16 variant=standard hw=32\nlayer y d=3 c=16 n=16 variant=spatial hw=32\n\
                    network b\nlayer z d=3 c=16 n=32 variant=separate s=4 stride=2 hw=32\n";
        let nets = parse_netspec(text).unwrap();
        let mut joined = nets[0].clone();
        joined.layers.extend(nets[1].layers.clone());
        let sum = network_counts(&nets[0]).unwrap().total + network_counts(&nets[1]).unwrap().total;
        assert_eq!(network_counts(&joined).unwrap().total, sum);
    }

    #[test]
    fn degenerate_variants_reproduce_standard_counts() {
        let std = network_counts(&one("layer l d=3 c=8 n=8 variant=standard hw=8")).unwrap().total;
        let ch = network_counts(&one("layer l d=3 c=8 n=8 variant=channel chat=8 g=1 hw=8")).unwrap().total;
        assert_eq!(ch, std);
        let std1 = network_counts(&one("layer l d=1 c=8 n=8 variant=standard hw=8")).unwrap().total;
        let sp1 = network_counts(&one("layer l d=1 c=8 n=8 variant=spatial hw=8")).unwrap().total;
        assert_eq!(sp1, std1);
        // a single all-ones learnable mask stores its bits and pays MASK ops,
        // but fp32 values and MULs are unchanged
        let l1 = network_counts(&one("layer l d=3 c=8 n=8 variant=shared s=1 hw=8")).unwrap().total;
        assert_eq!(l1.param_values_fp32, std.param_values_fp32);
        assert_eq!(l1.mul_fp32, std.mul_fp32);
    }

    #[test]
    fn composition_mismatch_rejected() {
        let net = one("layer a d=3 c=3 n=16 hw=8\nlayer b d=3 c=32 n=16 hw=8");
        assert!(matches!(network_counts(&net), Err(Error::Shape(_))));
        // branch input from an earlier layer is fine
        let ok = one("layer a d=3 c=3 n=16 hw=8\nlayer b d=3 c=16 n=32 hw=8\nlayer p d=1 c=16 n=32 hw=8");
        assert!(network_counts(&ok).is_ok());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = "network x\n\nlayer a d=3 c=3 n=16 hw=8\nlayer b d=3 c=16 n=oops hw=8\n";
        match parse_netspec(bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse_netspec("layer a d=3 c=3 n=16 hw=8 bogus=1"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_netspec("conv a"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_netspec("layer a d=3 c=3 n=15 variant=spatial hw=8"), Err(Error::Parse { .. })));
        assert!(parse_netspec("").unwrap().is_empty());
    }

    #[test]
    fn sci_formatting() {
        assert_eq!(sci(848_944.0), "8.5x10^5");
        assert_eq!(sci(125_485_000.0), "1.3x10^8");
        assert_eq!(sci(99_999.0), "1.0x10^5");
    }

    #[test]
    fn records_round_trip_through_json() {
        let net = one("layer a d=3 c=3 n=16 variant=standard hw=8\nlayer b d=3 c=16 n=32 variant=separate s=4 hw=8");
        let counts = network_counts(&net).unwrap();
        for r in counts.records() {
            let line = serde_json::to_string(&r).unwrap();
            let back: CountRecord = serde_json::from_str(&line).unwrap();
            assert_eq!(back, r);
        }
        let table = render_records(&counts.records());
        assert_eq!(table.lines().count(), 4);
    }
}
