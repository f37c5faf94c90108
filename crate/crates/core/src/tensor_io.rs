//! Binary tensor blobs.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size      | field                              |
//! |--------|-----------|------------------------------------|
//! | 0      | 4         | magic `CXTB`                       |
//! | 4      | 1         | version, currently `1`             |
//! | 5      | 1         | dtype: `0` = f32, `1` = f64        |
//! | 6      | 2         | rank `r` (at most 8)               |
//! | 8      | 8 * r     | dimensions as u64                  |
//! | 8+8r   | rest      | row-major element data             |
//!
//! The payload length must equal the product of the dimensions times the
//! element width; trailing or missing bytes are rejected. Checkpoint
//! parameters and cached feature matrices both use this format.

use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CXTB";
const VERSION: u8 = 1;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A decoded blob. Values are widened to f64 regardless of the stored dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn header(dtype: DType, shape: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * shape.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.extend_from_slice(&(shape.len() as u16).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out
}

pub fn encode_f32(array: &ArrayD<f32>) -> Vec<u8> {
    let mut out = header(DType::F32, array.shape());
    out.reserve(array.len() * 4);
    for v in array.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_f64(array: &ArrayD<f64>) -> Vec<u8> {
    let mut out = header(DType::F64, array.shape());
    out.reserve(array.len() * 8);
    for v in array.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<TensorBlob> {
    let bad = |m: String| Error::format("tensor blob", m);
    if bytes.len() < 8 {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let dtype = match bytes[5] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(bad(format!("unknown dtype code {other}"))),
    };
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    if rank > MAX_RANK {
        return Err(bad(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let dims_end = 8 + 8 * rank;
    if bytes.len() < dims_end {
        return Err(bad("truncated dimension table".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for i in 0..rank {
        let off = 8 + 8 * i;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
        let d = usize::try_from(d).map_err(|_| bad(format!("dimension {d} too large")))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| bad("element count overflows".into()))?;
        shape.push(d);
    }
    let payload = &bytes[dims_end..];
    let expected = count
        .checked_mul(dtype.width())
        .ok_or_else(|| bad("payload size overflows".into()))?;
    if payload.len() != expected {
        return Err(bad(format!(
            "payload is {} bytes, shape {:?} needs {}",
            payload.len(),
            shape,
            expected
        )));
    }
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok(TensorBlob { dtype, shape, data })
}

impl TensorBlob {
    pub fn into_f32(self) -> ArrayD<f32> {
        let data = self.data.into_iter().map(|v| v as f32).collect();
        ArrayD::from_shape_vec(IxDyn(&self.shape), data).expect("validated shape")
    }

    pub fn into_f64(self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data).expect("validated shape")
    }
}

pub fn write_f32(path: &Path, array: &ArrayD<f32>) -> Result<()> {
    std::fs::write(path, encode_f32(array)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<TensorBlob> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Writes a feature matrix cache (rows = records, columns = feature dimensions).
pub fn write_features(path: &Path, features: &Array2<f32>) -> Result<()> {
    write_f32(path, &features.clone().into_dyn())
}

pub fn read_features(path: &Path) -> Result<Array2<f32>> {
    decode_features(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn decode_features(bytes: &[u8]) -> Result<Array2<f32>> {
    let blob = decode(bytes)?;
    if blob.shape.len() != 2 {
        return Err(Error::format(
            "feature cache",
            format!("expected a rank-2 matrix, found rank {}", blob.shape.len()),
        ));
    }
    blob.into_f32()
        .into_dimensionality()
        .map_err(|e| Error::format("feature cache", e.to_string()))
}
