//! Flat binary tensor format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SEQT"
//! 4       4     version, u32 LE (currently 1)
//! 8       4     dtype tag, u32 LE (1 = f32, 2 = f64)
//! 12      32    dims N, C, H, W as u64 LE
//! 44      ..    elements, row-major, little-endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"SEQT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 44;

fn dtype_tag(dtype: DType) -> u32 {
    match dtype {
        DType::F32 => 1,
        DType::F64 => 2,
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let elem = match t.dtype() {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + elem * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dtype_tag(t.dtype()).to_le_bytes());
    for d in t.shape().dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match t.dtype() {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

/// Decodes one tensor; the buffer must contain exactly one record.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Decode(format!(
            "need at least {HEADER_LEN} header bytes, got {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Decode("bad magic".into()));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::Decode(format!("unsupported version {version}")));
    }
    let (dtype, elem) = match u32_at(bytes, 8) {
        1 => (DType::F32, 4),
        2 => (DType::F64, 8),
        tag => return Err(Error::Decode(format!("unknown dtype tag {tag}"))),
    };
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = usize::try_from(u64_at(bytes, 12 + 8 * i))
            .map_err(|_| Error::Decode("dimension exceeds address space".into()))?;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])
        .map_err(|e| Error::Decode(e.to_string()))?;
    let payload = &bytes[HEADER_LEN..];
    let expected = shape
        .numel()
        .checked_mul(elem)
        .ok_or_else(|| Error::Decode("payload size overflows".into()))?;
    if payload.len() != expected {
        return Err(Error::Decode(format!(
            "shape {shape} needs {expected} payload bytes, got {}",
            payload.len()
        )));
    }
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Decode("non-finite element".into()));
    }
    Tensor::with_dtype(shape, data, dtype)
}

pub fn write_to(t: &Tensor, mut w: impl Write) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

pub fn read_from(mut r: impl Read) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(t))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&std::fs::read(path)?)
}
