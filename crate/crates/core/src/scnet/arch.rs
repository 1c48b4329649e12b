//! Architecture descriptor, flat parameter layout, and the binary model
//! file.
//!
//! All parameters live in one flat `Vec<f64>`; each tensor is a [`Slot`]
//! (offset + shape) into it. Gradients and optimizer moments use the same
//! layout, so optimizers and finite-difference checks work on plain slices.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

use crate::error::{Error, Result};

/// Width of the Fourier-encoded correspondence.
pub const INPUT_DIM: usize = 18;

pub const MODEL_MAGIC: &[u8; 8] = b"NRSCNET\0";
pub const MODEL_VERSION: u32 = 1;
pub const OPTIMIZER_TAG: &[u8; 8] = b"ADAMSTAT";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    /// Widths of the initial embedding MLP; the last one is the feature
    /// width `d`.
    pub init_widths: Vec<usize>,
    /// Correspondence-embedding modules.
    pub blocks: usize,
    /// Attention units per module.
    pub units_per_block: usize,
    /// Hidden width of each unit's feedforward network.
    pub ffn_hidden: usize,
    /// Widths of the classification head; the last must be 1.
    pub head_widths: Vec<usize>,
    /// Group-normalization groups for every normalized MLP layer.
    pub groups: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            init_widths: vec![256, 256, 256],
            blocks: 3,
            units_per_block: 2,
            ffn_hidden: 512,
            head_widths: vec![128, 64, 1],
            groups: 8,
        }
    }
}

impl Architecture {
    /// Feature width `d` with `init_layers` embedding layers, a `2d`
    /// feedforward and a `d/2 → d/4 → 1` head. The default is
    /// `scaled(256, 3, 3, 2, 8)`.
    pub fn scaled(d: usize, init_layers: usize, blocks: usize, units_per_block: usize, groups: usize) -> Self {
        Self {
            init_widths: vec![d; init_layers],
            blocks,
            units_per_block,
            ffn_hidden: 2 * d,
            head_widths: vec![d / 2, d / 4, 1],
            groups,
        }
    }

    /// A reduced network with the same structure, for fast tests.
    pub fn micro(d: usize, blocks: usize, units_per_block: usize) -> Self {
        Self::scaled(d, 2, blocks, units_per_block, 2)
    }

    pub fn feature_dim(&self) -> usize {
        *self.init_widths.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.init_widths.is_empty() || self.init_widths.contains(&0) {
            return Err(Error::invalid("init_widths", "must be non-empty and positive"));
        }
        if self.head_widths.last() != Some(&1) || self.head_widths.contains(&0) {
            return Err(Error::invalid("head_widths", "must be positive and end in 1"));
        }
        if self.groups == 0 {
            return Err(Error::invalid("groups", "must be at least 1"));
        }
        let normalized = self
            .init_widths
            .iter()
            .chain(&self.head_widths[..self.head_widths.len() - 1]);
        for &w in normalized {
            if w % self.groups != 0 {
                return Err(Error::invalid(
                    "groups",
                    format!("{} groups do not divide width {w}", self.groups),
                ));
            }
        }
        if self.blocks > 0 && (self.units_per_block == 0 || self.ffn_hidden == 0) {
            return Err(Error::invalid("units_per_block", "attention modules need units and a feedforward width"));
        }
        Ok(())
    }

    fn descriptor(&self) -> Vec<u32> {
        let mut d = vec![INPUT_DIM as u32, self.init_widths.len() as u32];
        d.extend(self.init_widths.iter().map(|&w| w as u32));
        d.extend([
            self.blocks as u32,
            self.units_per_block as u32,
            self.ffn_hidden as u32,
            self.head_widths.len() as u32,
        ]);
        d.extend(self.head_widths.iter().map(|&w| w as u32));
        d.push(self.groups as u32);
        d
    }
}

/// Location of one tensor in the flat parameter vector. Vectors have
/// `rows == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn mat<'a>(&self, buf: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &buf[self.range()]).expect("slot in bounds")
    }

    pub fn mat_mut<'a>(&self, buf: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut buf[self.range()])
            .expect("slot in bounds")
    }

    pub fn vec<'a>(&self, buf: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&buf[self.range()])
    }

    pub fn vec_mut<'a>(&self, buf: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut buf[self.range()])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearSlots {
    /// `in × out`.
    pub weight: Slot,
    pub bias: Option<Slot>,
}

#[derive(Debug, Clone, Copy)]
pub struct NormSlots {
    pub gamma: Slot,
    pub beta: Slot,
}

/// One linear layer optionally followed by group norm + leaky ReLU.
#[derive(Debug, Clone, Copy)]
pub struct MlpLayerSlots {
    pub linear: LinearSlots,
    pub norm: Option<NormSlots>,
}

#[derive(Debug, Clone, Copy)]
pub struct UnitSlots {
    pub query: Slot,
    pub key: Slot,
    pub value: Slot,
    pub attn_out: LinearSlots,
    pub norm1: NormSlots,
    pub ffn_in: LinearSlots,
    pub ffn_out: LinearSlots,
    pub norm2: NormSlots,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub init: Vec<MlpLayerSlots>,
    pub blocks: Vec<Vec<UnitSlots>>,
    pub head: Vec<MlpLayerSlots>,
    pub sigma_f: Slot,
    /// Tensor names in declaration order.
    pub names: Vec<(String, Slot)>,
    pub total: usize,
}

impl Layout {
    /// Name of the tensor holding flat index `i`.
    pub fn name_of(&self, i: usize) -> &str {
        self.names
            .iter()
            .find(|(_, s)| s.range().contains(&i))
            .map(|(n, _)| n.as_str())
            .unwrap_or("?")
    }
}

struct Builder {
    offset: usize,
    names: Vec<(String, Slot)>,
}

impl Builder {
    fn slot(&mut self, name: String, rows: usize, cols: usize) -> Slot {
        let s = Slot {
            offset: self.offset,
            rows,
            cols,
        };
        self.offset += rows * cols;
        self.names.push((name, s));
        s
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> LinearSlots {
        LinearSlots {
            weight: self.slot(format!("{name}.weight"), fan_in, fan_out),
            bias: bias.then(|| self.slot(format!("{name}.bias"), 1, fan_out)),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> NormSlots {
        NormSlots {
            gamma: self.slot(format!("{name}.gamma"), 1, width),
            beta: self.slot(format!("{name}.beta"), 1, width),
        }
    }
}

impl Layout {
    pub fn new(arch: &Architecture) -> Self {
        let mut b = Builder {
            offset: 0,
            names: Vec::new(),
        };
        let mut fan_in = INPUT_DIM;
        let mut init = Vec::new();
        for (l, &w) in arch.init_widths.iter().enumerate() {
            let name = format!("init.{l}");
            let linear = b.linear(&name, fan_in, w, true);
            let norm = Some(b.norm(&format!("{name}.gn"), w));
            init.push(MlpLayerSlots { linear, norm });
            fan_in = w;
        }
        let d = arch.feature_dim();
        let mut blocks = Vec::new();
        for bi in 0..arch.blocks {
            let mut units = Vec::new();
            for ui in 0..arch.units_per_block {
                let name = format!("block.{bi}.unit.{ui}");
                units.push(UnitSlots {
                    query: b.slot(format!("{name}.query"), d, d),
                    key: b.slot(format!("{name}.key"), d, d),
                    value: b.slot(format!("{name}.value"), d, d),
                    attn_out: b.linear(&format!("{name}.attn_out"), d, d, true),
                    norm1: b.norm(&format!("{name}.ln1"), d),
                    ffn_in: b.linear(&format!("{name}.ffn_in"), d, arch.ffn_hidden, true),
                    ffn_out: b.linear(&format!("{name}.ffn_out"), arch.ffn_hidden, d, true),
                    norm2: b.norm(&format!("{name}.ln2"), d),
                });
            }
            blocks.push(units);
        }
        let mut head = Vec::new();
        let mut fan_in = d;
        let last = arch.head_widths.len() - 1;
        for (l, &w) in arch.head_widths.iter().enumerate() {
            let name = format!("head.{l}");
            let linear = b.linear(&name, fan_in, w, true);
            let norm = (l < last).then(|| b.norm(&format!("{name}.gn"), w));
            head.push(MlpLayerSlots { linear, norm });
            fan_in = w;
        }
        let sigma_f = b.slot("sigma_f".to_string(), 1, 1);
        Layout {
            init,
            blocks,
            head,
            sigma_f,
            total: b.offset,
            names: b.names,
        }
    }

    /// Linear-layer weight slots with their fan-in, in declaration order.
    pub fn linear_weights(&self) -> Vec<(Slot, usize)> {
        let mut out = Vec::new();
        let mut push = |l: &LinearSlots| {
            out.push((l.weight, l.weight.rows));
            if let Some(b) = l.bias {
                out.push((b, l.weight.rows));
            }
        };
        for m in &self.init {
            push(&m.linear);
        }
        for u in self.blocks.iter().flatten() {
            for s in [u.query, u.key, u.value] {
                push(&LinearSlots { weight: s, bias: None });
            }
            push(&u.attn_out);
            push(&u.ffn_in);
            push(&u.ffn_out);
        }
        for m in &self.head {
            push(&m.linear);
        }
        out
    }

    pub fn norm_slots(&self) -> Vec<NormSlots> {
        let mut out: Vec<NormSlots> = self.init.iter().filter_map(|m| m.norm).collect();
        for u in self.blocks.iter().flatten() {
            out.push(u.norm1);
            out.push(u.norm2);
        }
        out.extend(self.head.iter().filter_map(|m| m.norm));
        out
    }
}

/// Adam moments stored alongside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes an architecture and its parameters (as little-endian f32),
/// optionally followed by an optimizer section.
pub fn encode_model(arch: &Architecture, params: &[f64], optimizer: Option<&OptimizerState>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.len() * 4);
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut out, MODEL_VERSION);
    let desc = arch.descriptor();
    put_u32(&mut out, desc.len() as u32);
    for v in desc {
        put_u32(&mut out, v);
    }
    put_u64(&mut out, params.len() as u64);
    for &p in params {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    if let Some(opt) = optimizer {
        out.extend_from_slice(OPTIMIZER_TAG);
        put_u64(&mut out, opt.step);
        put_u64(&mut out, opt.first_moment.len() as u64);
        for &m in opt.first_moment.iter().chain(&opt.second_moment) {
            out.extend_from_slice(&m.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("model file", 0, format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decoded model file.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub architecture: Architecture,
    pub params: Vec<f64>,
    pub optimizer: Option<OptimizerState>,
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelFile> {
    let bad = |reason: &str| Error::format("model file", 0, reason.to_string());
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MODEL_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    if n > 4096 {
        return Err(bad("descriptor too long"));
    }
    let desc: Vec<usize> = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let arch = parse_descriptor(&desc).ok_or_else(|| bad("malformed architecture descriptor"))?;
    arch.validate()?;
    let count = r.u64()? as usize;
    let expected = Layout::new(&arch).total;
    if count != expected {
        return Err(Error::ArchitectureMismatch(format!(
            "file holds {count} parameters, descriptor implies {expected}"
        )));
    }
    let raw = r.take(count * 4)?;
    let params = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let optimizer = if r.pos == bytes.len() {
        None
    } else {
        if r.take(8)? != OPTIMIZER_TAG {
            return Err(bad("unknown trailing section"));
        }
        let step = r.u64()?;
        let len = r.u64()? as usize;
        if len != count {
            return Err(bad("optimizer state length mismatch"));
        }
        let raw = r.take(len * 16)?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (m, v) = vals.split_at(len);
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after optimizer state"));
        }
        Some(OptimizerState {
            step,
            first_moment: m.to_vec(),
            second_moment: v.to_vec(),
        })
    };
    Ok(ModelFile {
        architecture: arch,
        params,
        optimizer,
    })
}

fn parse_descriptor(d: &[usize]) -> Option<Architecture> {
    let mut it = d.iter().copied();
    if it.next()? != INPUT_DIM {
        return None;
    }
    let n_init = it.next()?;
    let init_widths: Vec<usize> = (0..n_init).map(|_| it.next()).collect::<Option<_>>()?;
    let blocks = it.next()?;
    let units_per_block = it.next()?;
    let ffn_hidden = it.next()?;
    let n_head = it.next()?;
    let head_widths: Vec<usize> = (0..n_head).map(|_| it.next()).collect::<Option<_>>()?;
    let groups = it.next()?;
    if it.next().is_some() {
        return None;
    }
    Some(Architecture {
        init_widths,
        blocks,
        units_per_block,
        ffn_hidden,
        head_widths,
        groups,
    })
}
