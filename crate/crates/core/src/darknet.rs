//! Darknet `.cfg` text format and binary `.weights` format.
//!
//! Weights files start with three little-endian `i32` version fields and a
//! `seen` counter (64-bit from version 0.2 on, 32-bit before), followed by
//! each convolution's parameters in network order: biases, then batch-norm
//! scales, rolling means and rolling variances when the layer normalizes,
//! then the kernel in `[out][in][kh][kw]` order. Every scalar is an `f32`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::model::{
    describe_violations, ActivationKind, ConvSpec, LayerSpec, MaxPoolSpec, NetworkSpec, RegionSpec, Violation,
    VOC_ANCHORS,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CfgError {
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: section [{section}] is missing required key `{key}`")]
    MissingKey { line: usize, section: String, key: String },
    #[error("line {line}: `{key}` expects a number, got `{value}`")]
    MalformedNumber { line: usize, key: String, value: String },
    #[error("line {line}: unsupported value `{value}` for `{key}`")]
    BadValue { line: usize, key: String, value: String },
    #[error("line {line}: cannot parse `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: {}", describe_violations(.violations))]
    SemanticError { line: usize, violations: Vec<Violation> },
    #[error("invalid network: {}", describe_violations(.0))]
    InvalidSpec(Vec<Violation>),
}

/// Non-fatal finding while parsing, such as a training-only key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CfgWarning {
    pub line: usize,
    pub message: String,
}

struct Section {
    name: String,
    line: usize,
    entries: Vec<(usize, String, String)>,
}

struct Fields<'a> {
    section: &'a Section,
    used: Vec<bool>,
}

impl<'a> Fields<'a> {
    fn new(section: &'a Section) -> Self {
        Fields { section, used: vec![false; section.entries.len()] }
    }

    fn raw(&mut self, key: &str) -> Option<(usize, &'a str)> {
        // last occurrence wins
        let mut found = None;
        for (j, (line, k, v)) in self.section.entries.iter().enumerate() {
            if k == key {
                self.used[j] = true;
                found = Some((*line, v.as_str()));
            }
        }
        found
    }

    fn number<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, CfgError> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| CfgError::MalformedNumber {
                line,
                key: key.into(),
                value: v.into(),
            }),
        }
    }

    fn number_or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, CfgError> {
        Ok(self.number(key)?.unwrap_or(default))
    }

    fn required<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, CfgError> {
        self.number(key)?.ok_or_else(|| CfgError::MissingKey {
            line: self.section.line,
            section: self.section.name.clone(),
            key: key.into(),
        })
    }

    fn finish(self, warnings: &mut Vec<CfgWarning>) {
        for (used, (line, key, _)) in self.used.iter().zip(&self.section.entries) {
            if !used {
                warnings.push(CfgWarning {
                    line: *line,
                    message: format!("ignoring key `{key}` in [{}]", self.section.name),
                });
            }
        }
    }
}

fn sections(text: &str) -> Result<Vec<Section>, CfgError> {
    let mut out: Vec<Section> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split(['#', ';']).next().unwrap_or("");
        let stripped: String = content.chars().filter(|c| !c.is_whitespace()).collect();
        if stripped.is_empty() {
            continue;
        }
        if let Some(name) = stripped.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| CfgError::Syntax {
                line,
                text: raw.trim().into(),
            })?;
            out.push(Section { name: name.to_string(), line, entries: Vec::new() });
            continue;
        }
        let (key, value) = stripped.split_once('=').ok_or_else(|| CfgError::Syntax {
            line,
            text: raw.trim().into(),
        })?;
        let section = out.last_mut().ok_or_else(|| CfgError::Syntax {
            line,
            text: raw.trim().into(),
        })?;
        section.entries.push((line, key.to_string(), value.to_string()));
    }
    Ok(out)
}

fn parse_activation(f: &mut Fields<'_>) -> Result<ActivationKind, CfgError> {
    match f.raw("activation") {
        None | Some((_, "linear")) => Ok(ActivationKind::Linear),
        Some((_, "leaky")) => Ok(ActivationKind::Leaky),
        Some((_, "relu")) => Ok(ActivationKind::Relu),
        Some((line, other)) => Err(CfgError::BadValue {
            line,
            key: "activation".into(),
            value: other.into(),
        }),
    }
}

fn parse_bool(f: &mut Fields<'_>, key: &str) -> Result<bool, CfgError> {
    Ok(f.number_or::<i64>(key, 0)? != 0)
}

fn parse_anchors(f: &mut Fields<'_>, num: usize) -> Result<Vec<(f32, f32)>, CfgError> {
    let Some((line, raw)) = f.raw("anchors") else {
        if num == VOC_ANCHORS.len() {
            return Ok(VOC_ANCHORS.to_vec());
        }
        return Err(CfgError::MissingKey {
            line: f.section.line,
            section: f.section.name.clone(),
            key: "anchors".into(),
        });
    };
    let values = raw
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f32>().map_err(|_| CfgError::MalformedNumber {
                line,
                key: "anchors".into(),
                value: s.into(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.len() % 2 != 0 {
        return Err(CfgError::BadValue { line, key: "anchors".into(), value: raw.into() });
    }
    Ok(values.chunks_exact(2).map(|p| (p[0], p[1])).collect())
}

/// Parses a cfg, also returning warnings for keys the engine ignores.
pub fn parse_cfg_with_warnings(text: &str) -> Result<(NetworkSpec, Vec<CfgWarning>), CfgError> {
    let sections = sections(text)?;
    let mut warnings = Vec::new();
    let mut iter = sections.iter();
    let net = match iter.next() {
        Some(s) if s.name == "net" || s.name == "network" => s,
        Some(s) => {
            return Err(CfgError::MissingKey {
                line: s.line,
                section: "net".into(),
                key: "width".into(),
            })
        }
        None => {
            return Err(CfgError::MissingKey { line: 1, section: "net".into(), key: "width".into() });
        }
    };
    let mut f = Fields::new(net);
    let input_w = f.required("width")?;
    let input_h = f.required("height")?;
    let input_c = f.required("channels")?;
    f.finish(&mut warnings);

    let mut layers = Vec::new();
    let mut layer_lines = Vec::new();
    for s in iter {
        let mut f = Fields::new(s);
        let layer = match s.name.as_str() {
            "convolutional" | "conv" => {
                let size: usize = f.number_or("size", 1)?;
                let explicit: usize = f.number_or("padding", 0)?;
                let pad = if parse_bool(&mut f, "pad")? { size / 2 } else { explicit };
                LayerSpec::Convolutional(ConvSpec {
                    filters: f.required("filters")?,
                    size,
                    stride: f.number_or("stride", 1)?,
                    pad,
                    batch_normalize: parse_bool(&mut f, "batch_normalize")?,
                    activation: parse_activation(&mut f)?,
                })
            }
            "maxpool" | "max" => LayerSpec::MaxPool(MaxPoolSpec {
                size: f.required("size")?,
                stride: f.number_or("stride", 1)?,
                pad: f.number_or("padding", 0)?,
            }),
            "region" => {
                let num: usize = f.required("num")?;
                LayerSpec::Region(RegionSpec {
                    classes: f.required("classes")?,
                    num_anchors: num,
                    anchors: parse_anchors(&mut f, num)?,
                    coords: f.number_or("coords", 4)?,
                })
            }
            other => {
                return Err(CfgError::UnknownSection { line: s.line, name: other.into() });
            }
        };
        f.finish(&mut warnings);
        layers.push(layer);
        layer_lines.push(s.line);
    }

    let spec = NetworkSpec { input_w, input_h, input_c, layers };
    if let Err(violations) = spec.validate() {
        let line = violations
            .iter()
            .find_map(|v| violation_layer(v).and_then(|l| layer_lines.get(l).copied()))
            .unwrap_or(net.line);
        return Err(CfgError::SemanticError { line, violations });
    }
    for w in &warnings {
        log::warn!("cfg line {}: {}", w.line, w.message);
    }
    Ok((spec, warnings))
}

fn violation_layer(v: &Violation) -> Option<usize> {
    use crate::model::ShapeError;
    match v {
        Violation::NoLayers => None,
        Violation::BadParameter { layer, .. }
        | Violation::RegionNotLast { layer }
        | Violation::RegionWithoutConv { layer }
        | Violation::AnchorCount { layer, .. }
        | Violation::HeadMismatch { layer, .. } => Some(*layer),
        Violation::Shape(ShapeError::NonPositiveDim { layer })
        | Violation::Shape(ShapeError::KernelLargerThanInput { layer, .. }) => Some(*layer),
        Violation::Shape(ShapeError::Empty) => None,
    }
}

pub fn parse_cfg(text: &str) -> Result<NetworkSpec, CfgError> {
    parse_cfg_with_warnings(text).map(|(spec, _)| spec)
}

fn fmt_anchor(v: f32) -> String {
    // shortest representation that parses back to the same f32
    format!("{v}")
}

pub fn emit_cfg(net: &NetworkSpec) -> Result<String, CfgError> {
    net.validate().map_err(CfgError::InvalidSpec)?;
    let mut out = String::new();
    let _ = writeln!(out, "[net]\nwidth={}\nheight={}\nchannels={}", net.input_w, net.input_h, net.input_c);
    for layer in &net.layers {
        out.push('\n');
        match layer {
            LayerSpec::Convolutional(c) => {
                out.push_str("[convolutional]\n");
                if c.batch_normalize {
                    out.push_str("batch_normalize=1\n");
                }
                let _ = writeln!(out, "filters={}\nsize={}\nstride={}", c.filters, c.size, c.stride);
                if c.pad == c.size / 2 {
                    out.push_str("pad=1\n");
                } else {
                    let _ = writeln!(out, "padding={}", c.pad);
                }
                let _ = writeln!(out, "activation={}", c.activation.as_str());
            }
            LayerSpec::MaxPool(p) => {
                let _ = writeln!(out, "[maxpool]\nsize={}\nstride={}", p.size, p.stride);
                if p.pad != 0 {
                    let _ = writeln!(out, "padding={}", p.pad);
                }
            }
            LayerSpec::Region(r) => {
                let anchors: Vec<String> = r
                    .anchors
                    .iter()
                    .flat_map(|&(w, h)| [fmt_anchor(w), fmt_anchor(h)])
                    .collect();
                let _ = writeln!(
                    out,
                    "[region]\nanchors={}\nclasses={}\ncoords={}\nnum={}",
                    anchors.join(","),
                    r.classes,
                    r.coords,
                    r.num_anchors
                );
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightsHeader {
    pub major: i32,
    pub minor: i32,
    pub revision: i32,
    pub seen: u64,
}

impl WeightsHeader {
    pub fn current() -> Self {
        WeightsHeader { major: 0, minor: 2, revision: 0, seen: 0 }
    }

    /// Whether `seen` is stored as 64 bits.
    pub fn wide_seen(&self) -> bool {
        self.major * 10 + self.minor >= 2
    }

    pub fn byte_len(&self) -> usize {
        12 + if self.wide_seen() { 8 } else { 4 }
    }
}

impl Default for WeightsHeader {
    fn default() -> Self {
        Self::current()
    }
}

/// Stored batch-norm statistics of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub scales: Vec<f32>,
    pub rolling_mean: Vec<f32>,
    pub rolling_variance: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub biases: Vec<f32>,
    pub bn: Option<BatchNormParams>,
    /// `[out][in][kh][kw]`
    pub kernel: Vec<f32>,
}

impl ConvWeights {
    pub fn scalar_count(&self) -> usize {
        self.biases.len() + self.bn.as_ref().map_or(0, |b| 3 * b.scales.len()) + self.kernel.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightsBlob {
    pub header: WeightsHeader,
    pub per_layer: Vec<ConvWeights>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WeightsError {
    #[error("weights truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{count} trailing bytes after the last layer")]
    TrailingBytes { count: usize },
    #[error("layer {layer}: rolling variance {index} is negative")]
    NegativeVariance { layer: usize, index: usize },
    #[error("negative version field in header")]
    BadHeader,
    #[error("weights do not match network: {0}")]
    LengthMismatch(String),
    #[error("invalid network: {}", describe_violations(.0))]
    InvalidSpec(Vec<Violation>),
}

/// Per conv layer: (input channels, spec).
fn conv_table(net: &NetworkSpec) -> Result<Vec<(usize, usize, ConvSpec)>, WeightsError> {
    let ins = net.layer_inputs().map_err(|e| WeightsError::InvalidSpec(vec![Violation::Shape(e)]))?;
    Ok(net.conv_layers().map(|(i, c)| (i, ins[i].c, *c)).collect())
}

/// Scalars one conv layer occupies in a weights file.
pub fn conv_scalar_count(in_c: usize, c: &ConvSpec) -> usize {
    let n = c.filters;
    n * if c.batch_normalize { 4 } else { 1 } + n * in_c * c.size * c.size
}

impl WeightsBlob {
    /// Checks every length against the network.
    pub fn check(&self, net: &NetworkSpec) -> Result<(), WeightsError> {
        let table = conv_table(net)?;
        if table.len() != self.per_layer.len() {
            return Err(WeightsError::LengthMismatch(format!(
                "{} conv layers in network, {} in weights",
                table.len(),
                self.per_layer.len()
            )));
        }
        for ((layer, in_c, c), w) in table.iter().zip(&self.per_layer) {
            let n = c.filters;
            let bad = |what: &str, found: usize, want: usize| {
                WeightsError::LengthMismatch(format!("layer {layer}: {what} has {found} values, expected {want}"))
            };
            if w.biases.len() != n {
                return Err(bad("biases", w.biases.len(), n));
            }
            let k = n * in_c * c.size * c.size;
            if w.kernel.len() != k {
                return Err(bad("kernel", w.kernel.len(), k));
            }
            match (&w.bn, c.batch_normalize) {
                (Some(bn), true) => {
                    for (what, v) in [
                        ("bn scales", &bn.scales),
                        ("rolling mean", &bn.rolling_mean),
                        ("rolling variance", &bn.rolling_variance),
                    ] {
                        if v.len() != n {
                            return Err(bad(what, v.len(), n));
                        }
                    }
                    if let Some(index) = bn.rolling_variance.iter().position(|&v| v < 0.0) {
                        return Err(WeightsError::NegativeVariance { layer: *layer, index });
                    }
                }
                (None, false) => {}
                (Some(_), false) => {
                    return Err(WeightsError::LengthMismatch(format!(
                        "layer {layer}: batch-norm statistics given for a layer without batch_normalize"
                    )))
                }
                (None, true) => {
                    return Err(WeightsError::LengthMismatch(format!(
                        "layer {layer}: batch_normalize set but no statistics given"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Random parameters: He-normal kernels, small biases, plausible BN statistics.
    pub fn random(net: &NetworkSpec, seed: u64) -> Result<Self, WeightsError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per_layer = conv_table(net)?
            .into_iter()
            .map(|(_, in_c, c)| {
                let fan_in = (in_c * c.size * c.size) as f32;
                let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("positive std");
                let n = c.filters;
                let kernel = (0..n * in_c * c.size * c.size).map(|_| normal.sample(&mut rng)).collect();
                let biases = (0..n).map(|_| rng.random_range(-0.1f32..0.1)).collect();
                let bn = c.batch_normalize.then(|| BatchNormParams {
                    scales: (0..n).map(|_| rng.random_range(0.5f32..1.5)).collect(),
                    rolling_mean: (0..n).map(|_| rng.random_range(-0.2f32..0.2)).collect(),
                    rolling_variance: (0..n).map(|_| rng.random_range(0.5f32..2.0)).collect(),
                });
                ConvWeights { biases, bn, kernel }
            })
            .collect();
        Ok(WeightsBlob { header: WeightsHeader::current(), per_layer })
    }

    pub fn total_scalars(&self) -> usize {
        self.per_layer.iter().map(ConvWeights::scalar_count).sum()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(WeightsError::Truncated { needed: end, available: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn i32(&mut self) -> Result<i32, WeightsError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, WeightsError> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn read_weights(bytes: &[u8], net: &NetworkSpec) -> Result<WeightsBlob, WeightsError> {
    net.validate().map_err(WeightsError::InvalidSpec)?;
    let mut r = Reader { bytes, pos: 0 };
    let (major, minor, revision) = (r.i32()?, r.i32()?, r.i32()?);
    if major < 0 || minor < 0 || revision < 0 {
        return Err(WeightsError::BadHeader);
    }
    let mut header = WeightsHeader { major, minor, revision, seen: 0 };
    header.seen = if header.wide_seen() {
        u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"))
    } else {
        u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as u64
    };

    let table = conv_table(net)?;
    let needed = header.byte_len() + 4 * table.iter().map(|(_, in_c, c)| conv_scalar_count(*in_c, c)).sum::<usize>();
    if bytes.len() < needed {
        return Err(WeightsError::Truncated { needed, available: bytes.len() });
    }
    let mut per_layer = Vec::with_capacity(table.len());
    for (layer, in_c, c) in table {
        let n = c.filters;
        let biases = r.f32s(n)?;
        let bn = if c.batch_normalize {
            let bn = BatchNormParams {
                scales: r.f32s(n)?,
                rolling_mean: r.f32s(n)?,
                rolling_variance: r.f32s(n)?,
            };
            if let Some(index) = bn.rolling_variance.iter().position(|&v| v < 0.0) {
                return Err(WeightsError::NegativeVariance { layer, index });
            }
            Some(bn)
        } else {
            None
        };
        let kernel = r.f32s(n * in_c * c.size * c.size)?;
        per_layer.push(ConvWeights { biases, bn, kernel });
    }
    if r.pos != bytes.len() {
        return Err(WeightsError::TrailingBytes { count: bytes.len() - r.pos });
    }
    Ok(WeightsBlob { header, per_layer })
}

pub fn write_weights(blob: &WeightsBlob, net: &NetworkSpec) -> Result<Vec<u8>, WeightsError> {
    blob.check(net)?;
    let h = &blob.header;
    if h.major < 0 || h.minor < 0 || h.revision < 0 {
        return Err(WeightsError::BadHeader);
    }
    let mut out = Vec::with_capacity(h.byte_len() + 4 * blob.total_scalars());
    for v in [h.major, h.minor, h.revision] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if h.wide_seen() {
        out.extend_from_slice(&h.seen.to_le_bytes());
    } else {
        let seen = u32::try_from(h.seen)
            .map_err(|_| WeightsError::LengthMismatch(format!("seen={} does not fit 32 bits", h.seen)))?;
        out.extend_from_slice(&seen.to_le_bytes());
    }
    let mut put = |vals: &[f32]| vals.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    for w in &blob.per_layer {
        put(&w.biases);
        if let Some(bn) = &w.bn {
            put(&bn.scales);
            put(&bn.rolling_mean);
            put(&bn.rolling_variance);
        }
        put(&w.kernel);
    }
    Ok(out)
}
