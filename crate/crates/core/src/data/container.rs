//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"STB1" | rank: u32 | dims: rank × u32 | dtype: u8 (0 = f32, 1 = f64) | payload
//! ```
//!
//! The payload is the row-major element sequence in the declared dtype.

use std::fs;
use std::io::Write;
use std::path::Path;

use stb_tensor::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"STB1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// A dense array as stored on disk, kept in its on-disk precision so a
/// read/write cycle reproduces the bytes exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl Container {
    pub fn from_tensor(t: &Tensor, dtype: DType) -> Self {
        let payload = match dtype {
            DType::F64 => Payload::F64(t.data().to_vec()),
            DType::F32 => Payload::F32(t.data().iter().map(|&v| v as f32).collect()),
        };
        Container {
            dims: t.shape().to_vec(),
            payload,
        }
    }

    pub fn dtype(&self) -> DType {
        match self.payload {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = match &self.payload {
            Payload::F64(v) => v.clone(),
            Payload::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
        };
        Ok(Tensor::new(self.dims.clone(), data)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n: usize = self.dims.iter().product();
        let mut out = Vec::with_capacity(9 + 4 * self.dims.len() + n * self.dtype().width());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(self.dtype().code());
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Parses a container; `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let err = |offset: usize, msg: String| Error::parse(origin, format!("byte {offset}"), msg);
        let take = |offset: usize, len: usize| -> Result<&[u8]> {
            bytes
                .get(offset..offset + len)
                .ok_or_else(|| err(offset, format!("truncated: need {len} bytes, file has {}", bytes.len())))
        };
        if take(0, 4)? != MAGIC {
            return Err(err(0, "bad magic, expected STB1".into()));
        }
        let u32_at = |offset: usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(offset, 4)?.try_into().unwrap()))
        };
        let rank = u32_at(4)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            let d = u32_at(8 + 4 * i)? as usize;
            if d == 0 {
                return Err(err(8 + 4 * i, "zero-sized dimension".into()));
            }
            dims.push(d);
        }
        let dtype_at = 8 + 4 * rank;
        let dtype = match take(dtype_at, 1)?[0] {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(err(dtype_at, format!("unknown dtype code {other}"))),
        };
        let n: usize = dims.iter().product();
        let start = dtype_at + 1;
        let body = take(start, n * dtype.width())?;
        if bytes.len() != start + body.len() {
            return Err(err(start + body.len(), "trailing bytes after payload".into()));
        }
        let payload = match dtype {
            DType::F32 => Payload::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => Payload::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Container { dims, payload })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
