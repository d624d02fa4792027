//! Single-file model container.
//!
//! All integers are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "MOLAEFMT"
//! 8       1     version (1)
//! 9       1     layer kind: 0 = moe, 1 = molae
//! 10      2     reserved, zero
//! 12      28    config: hidden, intermediate, experts, top_k, group_size,
//!               op_mask bits (up=1, gate=2, down=4), activation code; u32 each
//! 40      4     tensor count
//! 44      ...   tensor table, one entry per tensor:
//!                 u16 name length, name (UTF-8), u8 dtype (0 = f32, 1 = f64),
//!                 u8 rank (2), u32 rows, u32 cols, u64 offset, u64 byte length
//! ...     ...   payload; offsets are relative to its start, ascending, contiguous
//! ```
//!
//! Tensor names and order are fixed by the layer kind and config: `router`,
//! then `experts.{i}.{up,gate,down}` for standard layers; for latent layers
//! `groups.{g}.b_{op}` for each latent operator, `experts.{i}.a_{op}` for each
//! latent operator, then `experts.{i}.{op}` for each dense one.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::activation::Activation;
use crate::error::Result;
use crate::latent::{DenseOperators, LatentExpert, LatentGroup, MolaeConfig, MolaeLayer, OpMask, Operator};
use crate::layer::{FfnLayer, Layer};
use crate::linalg::Matrix;
use crate::moe::{ExpertWeights, MoeConfig, MoeLayer};
use crate::router::RouterWeights;

pub const MAGIC: [u8; 8] = *b"MOLAEFMT";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 44;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

impl FromStr for Dtype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(format!("unknown dtype `{other}` (expected f32 or f64)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormatError {
    #[error("bad magic at byte 0: found {found:02x?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported version {found} at byte 8 (expected {VERSION})")]
    UnsupportedVersion { found: u8 },
    #[error("unknown layer kind {found} at byte 9")]
    UnknownKind { found: u8 },
    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("{extra} trailing bytes after payload end at byte {expected}")]
    TrailingBytes { expected: u64, extra: u64 },
    #[error("invalid config at byte {offset}: {message}")]
    InvalidConfig { offset: u64, message: String },
    #[error("malformed tensor entry at byte {offset}: {message}")]
    BadEntry { offset: u64, message: String },
    #[error("tensor table entry {index} at byte {offset}: expected `{expected}`, found `{found}`")]
    UnexpectedTensor { index: usize, offset: u64, expected: String, found: String },
    #[error("tensor `{name}` at byte {offset}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, offset: u64, expected: (usize, usize), found: (usize, usize) },
    #[error("tensor `{name}` at byte {offset}: payload offset {found}, expected {expected}")]
    BadOffset { name: String, offset: u64, expected: u64, found: u64 },
    #[error("tensor table lists {found} tensors, schema expects {expected}")]
    TensorCount { expected: usize, found: usize },
    #[error("tensor `{name}` element {index} (file byte {offset}) is not finite")]
    NonFinite { name: String, index: usize, offset: u64 },
    #[error("tensor `{name}` element {index} is not representable as {dtype}")]
    Unrepresentable { name: String, index: usize, dtype: Dtype },
}

/// Tensors of `layer` in schema order.
fn schema(layer: &Layer) -> Vec<(String, &Matrix)> {
    let mut out: Vec<(String, &Matrix)> = Vec::new();
    match layer {
        Layer::Moe(l) => {
            out.push(("router".into(), &l.router().w_router));
            for (i, e) in l.experts().iter().enumerate() {
                out.push((format!("experts.{i}.up"), &e.w_up));
                out.push((format!("experts.{i}.gate"), &e.w_gate));
                out.push((format!("experts.{i}.down"), &e.w_down));
            }
        }
        Layer::Molae(l) => {
            let mask = l.config().op_mask;
            out.push(("router".into(), &l.router().w_router));
            for (g, group) in l.groups().iter().enumerate() {
                for op in mask.ops() {
                    out.push((format!("groups.{g}.b_{op}"), group.get(op).expect("validated")));
                }
            }
            for (i, e) in l.latent_experts().iter().enumerate() {
                for op in mask.ops() {
                    out.push((format!("experts.{i}.a_{op}"), e.get(op).expect("validated")));
                }
            }
            for (i, d) in l.dense_experts().iter().enumerate() {
                for op in Operator::ALL.into_iter().filter(|&op| !mask.contains(op)) {
                    out.push((format!("experts.{i}.{op}"), d.get(op).expect("validated")));
                }
            }
        }
    }
    out
}

/// Fixed part of a table entry: name length, dtype, rank, rows, cols, offset, byte length.
const MIN_ENTRY_LEN: u64 = 2 + 1 + 1 + 4 + 4 + 8 + 8;

fn expected_count(header: &Header) -> u64 {
    let e = header.experts as u64;
    match header.kind {
        Kind::Moe => 1 + 3 * e,
        Kind::Molae => {
            let latent = header.op_mask.count() as u64;
            let groups = e.div_ceil(header.group_size as u64);
            1 + groups * latent + e * latent + e * (3 - latent)
        }
    }
}

/// Expected `(name, shape)` list for a header.
fn expected_schema(header: &Header) -> Vec<(String, (usize, usize))> {
    let (n, m, e) = (header.hidden, header.intermediate, header.experts);
    let mut out = vec![("router".to_string(), (e, n))];
    let shape = |op: Operator| match op {
        Operator::Up | Operator::Gate => (m, n),
        Operator::Down => (n, m),
    };
    match header.kind {
        Kind::Moe => {
            for i in 0..e {
                for op in Operator::ALL {
                    out.push((format!("experts.{i}.{op}"), shape(op)));
                }
            }
        }
        Kind::Molae => {
            let mask = header.op_mask;
            for g in 0..e.div_ceil(header.group_size) {
                for op in mask.ops() {
                    out.push((format!("groups.{g}.b_{op}"), shape(op)));
                }
            }
            for i in 0..e {
                for op in mask.ops() {
                    out.push((format!("experts.{i}.a_{op}"), (m, m)));
                }
            }
            for i in 0..e {
                for op in Operator::ALL.into_iter().filter(|&op| !mask.contains(op)) {
                    out.push((format!("experts.{i}.{op}"), shape(op)));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Moe,
    Molae,
}

#[derive(Debug, Clone, Copy)]
struct Header {
    kind: Kind,
    hidden: usize,
    intermediate: usize,
    experts: usize,
    top_k: usize,
    group_size: usize,
    op_mask: OpMask,
    activation: Activation,
}

fn header_of(layer: &Layer) -> Header {
    match layer {
        Layer::Moe(l) => {
            let c = l.config();
            Header {
                kind: Kind::Moe,
                hidden: c.hidden,
                intermediate: c.intermediate,
                experts: c.experts,
                top_k: c.top_k,
                group_size: 1,
                op_mask: OpMask::NONE,
                activation: c.activation,
            }
        }
        Layer::Molae(l) => {
            let c = l.config();
            Header {
                kind: Kind::Molae,
                hidden: c.hidden,
                intermediate: c.intermediate,
                experts: c.experts,
                top_k: c.top_k,
                group_size: c.group_size,
                op_mask: c.op_mask,
                activation: c.activation,
            }
        }
    }
}

/// Serializes `layer`; every value must be finite in the target dtype.
pub fn to_bytes(layer: &Layer, dtype: Dtype) -> Result<Vec<u8>, FormatError> {
    let h = header_of(layer);
    let tensors = schema(layer);
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(match h.kind {
        Kind::Moe => 0,
        Kind::Molae => 1,
    });
    out.extend_from_slice(&[0, 0]);
    for v in [h.hidden, h.intermediate, h.experts, h.top_k, h.group_size] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&h.op_mask.bits().to_le_bytes());
    out.extend_from_slice(&h.activation.code().to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, m) in &tensors {
        let nbytes = (m.data().len() * dtype.size()) as u64;
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype.code());
        out.push(2);
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&nbytes.to_le_bytes());
        offset += nbytes;
    }
    for (name, m) in &tensors {
        for (index, &v) in m.data().iter().enumerate() {
            match dtype {
                Dtype::F32 => {
                    let narrow = v as f32;
                    if !narrow.is_finite() {
                        return Err(FormatError::Unrepresentable { name: name.clone(), index, dtype });
                    }
                    out.extend_from_slice(&narrow.to_le_bytes());
                }
                Dtype::F64 => {
                    if !v.is_finite() {
                        return Err(FormatError::Unrepresentable { name: name.clone(), index, dtype });
                    }
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.bytes.len() {
            return Err(FormatError::Truncated {
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct Entry {
    name: String,
    dtype: Dtype,
    rows: usize,
    cols: usize,
    offset: u64,
    entry_pos: u64,
}

/// Parses and validates a container. Values are widened to `f64`.
pub fn from_bytes(bytes: &[u8]) -> Result<Layer, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8).map_err(|_| FormatError::BadMagic { found: bytes[..bytes.len().min(8)].to_vec() })?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic { found: magic.to_vec() });
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion { found: version });
    }
    let kind = match r.u8()? {
        0 => Kind::Moe,
        1 => Kind::Molae,
        found => return Err(FormatError::UnknownKind { found }),
    };
    r.take(2)?;
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let [hidden, intermediate, experts, top_k, group_size] = dims;
    let mask_bits = r.u32()?;
    let op_mask = OpMask::from_bits(mask_bits)
        .ok_or_else(|| FormatError::InvalidConfig { offset: 32, message: format!("op-mask bits {mask_bits:#x}") })?;
    let act_code = r.u32()?;
    let activation = Activation::from_code(act_code)
        .ok_or_else(|| FormatError::InvalidConfig { offset: 36, message: format!("activation code {act_code}") })?;
    let header = Header { kind, hidden, intermediate, experts, top_k, group_size, op_mask, activation };
    validate_header(&header)?;

    let count = r.u32()? as usize;
    let want = expected_count(&header);
    if count as u64 != want {
        return Err(FormatError::TensorCount { expected: want as usize, found: count });
    }
    // Every entry needs at least MIN_ENTRY_LEN bytes; refuse before building the schema.
    let table_floor = r.pos as u64 + want * MIN_ENTRY_LEN;
    if (bytes.len() as u64) < table_floor {
        return Err(FormatError::Truncated { expected: table_floor, actual: bytes.len() as u64 });
    }
    let expected = expected_schema(&header);
    let mut entries = Vec::with_capacity(count);
    let mut next_offset = 0u64;
    for (index, (want_name, want_shape)) in expected.iter().enumerate() {
        let entry_pos = r.pos as u64;
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| FormatError::BadEntry { offset: entry_pos, message: "name is not UTF-8".into() })?
            .to_string();
        if &name != want_name {
            return Err(FormatError::UnexpectedTensor {
                index,
                offset: entry_pos,
                expected: want_name.clone(),
                found: name,
            });
        }
        let dtype_code = r.u8()?;
        let dtype = Dtype::from_code(dtype_code).ok_or_else(|| FormatError::BadEntry {
            offset: entry_pos,
            message: format!("unknown dtype code {dtype_code}"),
        })?;
        let rank = r.u8()?;
        if rank != 2 {
            return Err(FormatError::BadEntry { offset: entry_pos, message: format!("rank {rank}, expected 2") });
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if (rows, cols) != *want_shape {
            return Err(FormatError::ShapeMismatch {
                name,
                offset: entry_pos,
                expected: *want_shape,
                found: (rows, cols),
            });
        }
        let offset = r.u64()?;
        let nbytes = r.u64()?;
        if offset != next_offset {
            return Err(FormatError::BadOffset { name, offset: entry_pos, expected: next_offset, found: offset });
        }
        let want_bytes = (rows as u64).checked_mul(cols as u64).and_then(|c| c.checked_mul(dtype.size() as u64));
        if want_bytes != Some(nbytes) {
            return Err(FormatError::BadEntry {
                offset: entry_pos,
                message: format!("byte length {nbytes} does not match {rows}x{cols} {dtype}"),
            });
        }
        next_offset = next_offset.checked_add(nbytes).ok_or_else(|| FormatError::BadEntry {
            offset: entry_pos,
            message: "payload size overflows".into(),
        })?;
        entries.push(Entry { name, dtype, rows, cols, offset, entry_pos });
    }
    let payload_start = r.pos as u64;
    let total = payload_start.saturating_add(next_offset);
    let actual = bytes.len() as u64;
    if actual < total {
        return Err(FormatError::Truncated { expected: total, actual });
    }
    if actual > total {
        return Err(FormatError::TrailingBytes { expected: total, extra: actual - total });
    }

    let mut tensors = Vec::with_capacity(entries.len());
    for e in &entries {
        let start = (payload_start + e.offset) as usize;
        let size = e.dtype.size();
        let mut data = Vec::with_capacity(e.rows * e.cols);
        for index in 0..e.rows * e.cols {
            let at = start + index * size;
            let v = match e.dtype {
                Dtype::F32 => f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64,
                Dtype::F64 => f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()),
            };
            if !v.is_finite() {
                return Err(FormatError::NonFinite { name: e.name.clone(), index, offset: at as u64 });
            }
            data.push(v);
        }
        tensors.push(Matrix::new(e.rows, e.cols, data).expect("length checked"));
    }
    assemble(&header, tensors).map_err(|message| FormatError::InvalidConfig {
        offset: entries.first().map_or(HEADER_LEN as u64, |e| e.entry_pos),
        message,
    })
}

fn validate_header(h: &Header) -> Result<(), FormatError> {
    let bad = |offset: u64, message: String| Err(FormatError::InvalidConfig { offset, message });
    if h.hidden == 0 || h.intermediate == 0 {
        return bad(12, "zero hidden or intermediate dimension".into());
    }
    if h.experts == 0 {
        return bad(20, "zero experts".into());
    }
    if h.top_k == 0 || h.top_k > h.experts {
        return bad(24, format!("top_k {} outside 1..={}", h.top_k, h.experts));
    }
    if h.group_size == 0 || h.group_size > h.experts {
        return bad(28, format!("group size {} outside 1..={}", h.group_size, h.experts));
    }
    if h.kind == Kind::Moe && (h.group_size != 1 || !h.op_mask.is_empty()) {
        return bad(28, "standard layers carry group size 1 and an empty op-mask".into());
    }
    Ok(())
}

fn assemble(h: &Header, tensors: Vec<Matrix>) -> Result<Layer, String> {
    let mut it = tensors.into_iter();
    let router = RouterWeights::new(it.next().expect("router"));
    let layer = match h.kind {
        Kind::Moe => {
            let config = MoeConfig {
                hidden: h.hidden,
                intermediate: h.intermediate,
                experts: h.experts,
                top_k: h.top_k,
                activation: h.activation,
            };
            let experts = (0..h.experts)
                .map(|_| ExpertWeights {
                    w_up: it.next().expect("schema"),
                    w_gate: it.next().expect("schema"),
                    w_down: it.next().expect("schema"),
                })
                .collect();
            Layer::Moe(MoeLayer::new(config, experts, router).map_err(|e| e.to_string())?)
        }
        Kind::Molae => {
            let config = MolaeConfig {
                hidden: h.hidden,
                intermediate: h.intermediate,
                experts: h.experts,
                top_k: h.top_k,
                group_size: h.group_size,
                op_mask: h.op_mask,
                activation: h.activation,
            };
            let mask = h.op_mask;
            let mut groups = vec![LatentGroup::default(); config.groups()];
            for g in groups.iter_mut() {
                for op in mask.ops() {
                    g.set(op, it.next());
                }
            }
            let mut latent = vec![LatentExpert::default(); h.experts];
            for e in latent.iter_mut() {
                for op in mask.ops() {
                    e.set(op, it.next());
                }
            }
            let mut dense = vec![DenseOperators::default(); h.experts];
            for d in dense.iter_mut() {
                for op in Operator::ALL.into_iter().filter(|&op| !mask.contains(op)) {
                    d.set(op, it.next());
                }
            }
            Layer::Molae(MolaeLayer::new(config, groups, latent, dense, router).map_err(|e| e.to_string())?)
        }
    };
    Ok(layer)
}

/// Writes `layer` to `path` through a temporary file and a rename.
pub fn save(layer: &Layer, path: impl AsRef<Path>, dtype: Dtype) -> Result<Vec<u8>> {
    let bytes = to_bytes(layer, dtype)?;
    write_atomic(path.as_ref(), &bytes)?;
    Ok(bytes)
}

pub fn load(path: impl AsRef<Path>) -> Result<Layer> {
    let bytes = fs::read(path)?;
    Ok(from_bytes(&bytes)?)
}

/// Writes bytes via a sibling temp file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;

    fn tiny_moe() -> Layer {
        let config = MoeConfig { hidden: 3, intermediate: 2, experts: 2, top_k: 1, activation: Activation::Silu };
        let mut l = MoeLayer::zeros(config).unwrap();
        for (i, e) in l.experts_mut().iter_mut().enumerate() {
            e.w_up[(0, 1)] = 0.5 + i as f64;
            e.w_down[(2, 1)] = -0.25;
        }
        l.router_mut().w_router[(1, 2)] = 1.5;
        Layer::Moe(l)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let layer = tiny_moe();
        for dtype in [Dtype::F32, Dtype::F64] {
            let bytes = to_bytes(&layer, dtype).unwrap();
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back, layer);
            assert_eq!(to_bytes(&back, dtype).unwrap(), bytes);
        }
    }

    #[test]
    fn truncation_names_lengths() {
        let bytes = to_bytes(&tiny_moe(), Dtype::F32).unwrap();
        let cut = &bytes[..bytes.len() - 1];
        assert_eq!(
            from_bytes(cut),
            Err(FormatError::Truncated { expected: bytes.len() as u64, actual: bytes.len() as u64 - 1 })
        );
        assert!(matches!(from_bytes(&bytes[..20]), Err(FormatError::Truncated { .. })));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = to_bytes(&tiny_moe(), Dtype::F32).unwrap();
        bytes[8] = 9;
        assert_eq!(from_bytes(&bytes), Err(FormatError::UnsupportedVersion { found: 9 }));
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(FormatError::BadMagic { .. })));
        assert!(matches!(from_bytes(b"MO"), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn nan_payload_names_tensor() {
        let bytes = to_bytes(&tiny_moe(), Dtype::F32).unwrap();
        let mut bad = bytes.clone();
        let at = bad.len() - 4;
        bad[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        match from_bytes(&bad) {
            Err(FormatError::NonFinite { name, index, offset }) => {
                assert_eq!(name, "experts.1.down");
                assert_eq!(index, 5);
                assert_eq!(offset, at as u64);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = to_bytes(&tiny_moe(), Dtype::F64).unwrap();
        bytes.push(0);
        assert!(matches!(from_bytes(&bytes), Err(FormatError::TrailingBytes { extra: 1, .. })));
    }

    #[test]
    fn f32_overflow_is_rejected_on_save() {
        let Layer::Moe(mut l) = tiny_moe() else { unreachable!() };
        l.experts_mut()[0].w_gate[(1, 1)] = 1e300;
        assert!(matches!(to_bytes(&Layer::Moe(l), Dtype::F32), Err(FormatError::Unrepresentable { .. })));
    }
}
