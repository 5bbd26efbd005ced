//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `MOBI`, format version `u32`, section count
//! `u32`, then one `(tag [u8; 4], offset u64, len u64)` entry per section,
//! then the section payloads. A `CONF` section holds the run configuration as
//! text; each `LAYR` section holds one calibrated layer, with the merged
//! slice codes stored as bit-major packed planes.

use std::path::Path;

use thiserror::Error;

use slicequant::bitplane::{pack_bit_major, PackedPlanes};
use slicequant::qcore::{ClipParams, QuantParams};
use slicequant::router::RouterState;
use slicequant::slicer::{split_merged, SliceStack};
use slicequant::trainer::{CalibratedLayer, LayerParams};
use slicequant::{Matrix, QuantError};

use crate::config::{ConfigError, RunConfig};

pub const MAGIC: [u8; 4] = *b"MOBI";
pub const FORMAT_VERSION: u32 = 1;
const TAG_CONF: [u8; 4] = *b"CONF";
const TAG_LAYER: [u8; 4] = *b"LAYR";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("format version {found} not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated while reading {0}")]
    Truncated(&'static str),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("embedded config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One calibrated layer plus its frozen full-precision weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub weight: Matrix,
    pub params: LayerParams,
    pub stack: SliceStack,
}

impl LayerRecord {
    pub fn calibrated(&self) -> CalibratedLayer {
        CalibratedLayer {
            params: self.params.clone(),
            stack: self.stack.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub layers: Vec<LayerRecord>,
}

// ── Encoding ───────────────────────────────────────────────────────────────

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u32(v.len());
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len());
        self.0.extend_from_slice(v);
    }
    fn matrix(&mut self, m: &Matrix) {
        self.u32(m.rows());
        self.u32(m.cols());
        self.f64s(m.as_slice());
    }
    fn qparams(&mut self, qp: &QuantParams) {
        self.u8(qp.bits);
        self.u64(qp.group_size as u64);
        self.f64s(&qp.scales);
        self.f64s(&qp.zeros);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).ok_or(CheckpointError::Truncated(what))?;
        let s = self.buf.get(self.at..end).ok_or(CheckpointError::Truncated(what))?;
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64s(&mut self, what: &'static str) -> Result<Vec<f64>, CheckpointError> {
        let n = self.u32(what)?;
        let raw = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(what))?, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn bytes(&mut self, what: &'static str) -> Result<Vec<u8>, CheckpointError> {
        let n = self.u32(what)?;
        Ok(self.take(n, what)?.to_vec())
    }
    fn matrix(&mut self, what: &'static str) -> Result<Matrix, CheckpointError> {
        let rows = self.u32(what)?;
        let cols = self.u32(what)?;
        Ok(Matrix::from_vec(rows, cols, self.f64s(what)?)?)
    }
    fn qparams(&mut self, what: &'static str) -> Result<QuantParams, CheckpointError> {
        let bits = self.u8(what)?;
        let group_size = self.u64(what)?;
        let group_size = usize::try_from(group_size).unwrap_or(usize::MAX);
        let scales = self.f64s(what)?;
        let zeros = self.f64s(what)?;
        Ok(QuantParams::new(scales, zeros, bits, group_size)?)
    }
}

fn encode_layer(index: usize, rec: &LayerRecord) -> Result<Vec<u8>, CheckpointError> {
    let mut w = Writer::default();
    let stack = &rec.stack;
    let (out_dim, in_dim) = stack.weight_shape;
    w.u32(index);
    w.u32(out_dim);
    w.u32(in_dim);
    w.bytes(&stack.slice_bits);
    for qp in &stack.slice_params {
        w.qparams(qp);
    }
    let merged = stack.merge_codes(stack.num_slices())?;
    let planes = pack_bit_major(&merged, out_dim, in_dim, stack.total_bits() as u8)?;
    w.u32(planes.planes.len());
    for plane in &planes.planes {
        w.u32(plane.len());
        for word in plane {
            w.u64(*word);
        }
    }
    w.bytes(&stack.clamp_mask);

    w.f64s(&rec.params.clip.gamma_lo);
    w.f64s(&rec.params.clip.gamma_hi);
    let r = &rec.params.router;
    w.matrix(&r.w1);
    w.f64s(&r.b1);
    w.matrix(&r.w2);
    w.f64s(&r.b2);
    w.f64s(&r.thresholds);
    w.u64(r.step as u64);
    w.u64(r.total_steps as u64);
    w.matrix(&rec.weight);
    Ok(w.0)
}

fn decode_layer(buf: &[u8], expect_index: usize) -> Result<LayerRecord, CheckpointError> {
    let mut r = Reader { buf, at: 0 };
    let index = r.u32("layer index")?;
    if index != expect_index {
        return Err(CheckpointError::Corrupt(format!(
            "layer section {expect_index} claims index {index}"
        )));
    }
    let out_dim = r.u32("layer dims")?;
    let in_dim = r.u32("layer dims")?;
    let slice_bits = r.bytes("slice bits")?;
    slicequant::slicer::validate_slice_bits(&slice_bits)?;
    let slice_params = slice_bits
        .iter()
        .map(|_| r.qparams("slice params"))
        .collect::<Result<Vec<_>, _>>()?;
    let total: u8 = slice_bits.iter().sum();
    let n_planes = r.u32("plane count")?;
    if n_planes != total as usize {
        return Err(CheckpointError::Corrupt(format!("{n_planes} planes for {total} bits")));
    }
    let mut planes = Vec::with_capacity(n_planes);
    for _ in 0..n_planes {
        let n = r.u32("plane words")?;
        planes.push((0..n).map(|_| r.u64("plane words")).collect::<Result<Vec<_>, _>>()?);
    }
    let packed = PackedPlanes {
        planes,
        bits: total,
        out_dim,
        in_dim,
    };
    if packed.planes.iter().any(|p| p.len() != out_dim * packed.words_per_row()) {
        return Err(CheckpointError::Corrupt("plane length".into()));
    }
    let merged = packed.unpack();
    let mut slices = vec![Vec::with_capacity(merged.len()); slice_bits.len()];
    for &code in &merged {
        for (e, c) in split_merged(code, &slice_bits).into_iter().enumerate() {
            slices[e].push(c);
        }
    }
    let clamp_mask = r.bytes("clamp mask")?;
    if clamp_mask.len() != merged.len() {
        return Err(CheckpointError::Corrupt("clamp mask length".into()));
    }

    let clip = ClipParams {
        gamma_lo: r.f64s("clip")?,
        gamma_hi: r.f64s("clip")?,
    };
    let router = RouterState {
        w1: r.matrix("router")?,
        b1: r.f64s("router")?,
        w2: r.matrix("router")?,
        b2: r.f64s("router")?,
        thresholds: r.f64s("thresholds")?,
        step: r.u64("router step")? as usize,
        total_steps: r.u64("router step")? as usize,
    };
    let weight = r.matrix("weight")?;
    if r.at != buf.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes in layer", buf.len() - r.at)));
    }
    Ok(LayerRecord {
        weight,
        params: LayerParams { clip, router },
        stack: SliceStack {
            slices,
            slice_bits,
            slice_params,
            weight_shape: (out_dim, in_dim),
            clamp_mask,
        },
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut sections: Vec<([u8; 4], Vec<u8>)> = vec![(TAG_CONF, self.config.to_text().into_bytes())];
        for (i, layer) in self.layers.iter().enumerate() {
            sections.push((TAG_LAYER, encode_layer(i, layer)?));
        }
        let mut w = Writer::default();
        w.0.extend_from_slice(&MAGIC);
        w.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        w.u32(sections.len());
        let mut offset = (12 + sections.len() * 20) as u64;
        for (tag, body) in &sections {
            w.0.extend_from_slice(tag);
            w.u64(offset);
            w.u64(body.len() as u64);
            offset += body.len() as u64;
        }
        for (_, body) in &sections {
            w.0.extend_from_slice(body);
        }
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, at: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")? as u32;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let count = r.u32("section count")?;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        let mut covered = r.at + count * 20;
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4, "section table")?.try_into().unwrap();
            let offset = r.u64("section table")? as usize;
            let len = r.u64("section table")? as usize;
            let end = offset.checked_add(len).ok_or(CheckpointError::Truncated("section"))?;
            let body = buf.get(offset..end).ok_or(CheckpointError::Truncated("section"))?;
            covered = covered.max(end);
            table.push((tag, body));
        }
        if covered != buf.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes after the last section",
                buf.len().saturating_sub(covered)
            )));
        }
        let mut config = None;
        let mut layers = Vec::new();
        for (tag, body) in table {
            match tag {
                TAG_CONF => {
                    let text = std::str::from_utf8(body).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
                    config = Some(RunConfig::parse(text)?);
                }
                TAG_LAYER => layers.push(decode_layer(body, layers.len())?),
                other => {
                    return Err(CheckpointError::Corrupt(format!(
                        "unknown section {:?}",
                        String::from_utf8_lossy(&other)
                    )))
                }
            }
        }
        Ok(Self {
            config: config.ok_or_else(|| CheckpointError::Corrupt("missing CONF section".into()))?,
            layers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()?).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let buf = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&buf)
    }

    pub fn calibrated_layers(&self) -> Vec<CalibratedLayer> {
        self.layers.iter().map(LayerRecord::calibrated).collect()
    }
}
