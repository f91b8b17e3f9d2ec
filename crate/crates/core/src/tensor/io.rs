//! DSQT binary tensor files.
//!
//! Layout (little-endian): magic `DSQT`, `u8` version (1), `u8` dtype
//! (0 = f32, 1 = f64, 2 = u8), `u8` rank, `u64` dims, then the payload.

use std::fs;
use std::path::{Path, PathBuf};

use super::{numel, DType, Float, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DSQT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A typed array as stored on disk, detached from any graph.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl RawTensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "dsqt",
                format!("shape {shape:?} vs {} values", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_tensor<F: Float>(t: &Tensor<F>) -> Self {
        let data = match F::DTYPE {
            DType::F64 => TensorData::F64(t.to_f64()),
            _ => TensorData::F32(t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect()),
        };
        Self {
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(data))
    }

    /// Convert to a constant tensor of element type `F`.
    pub fn to_tensor<F: Float>(&self) -> Result<Tensor<F>> {
        let data: Vec<F> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| F::of(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| F::of(x)).collect(),
            TensorData::U8(v) => v.iter().map(|&x| F::of(x as f64)).collect(),
        };
        Tensor::new(data, &self.shape)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 8 * self.shape.len() + self.data.len() * self.data.dtype().size());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.data.dtype() as u8);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Decode one tensor from the front of `bytes`. `origin` names the file
    /// and `base` is the offset of `bytes[0]` within it, for error messages.
    /// Returns the tensor and the number of bytes consumed.
    pub fn decode(bytes: &[u8], origin: &Path, base: u64) -> Result<(Self, usize)> {
        let corrupt = |offset: usize, detail: String| Error::Corrupt {
            path: origin.to_path_buf(),
            offset: base + offset as u64,
            detail,
        };
        let need = |pos: usize, n: usize, what: &str| -> Result<()> {
            if bytes.len() < pos + n {
                Err(corrupt(
                    bytes.len(),
                    format!("truncated {what}: need {n} bytes at offset {}, file ends", base + pos as u64),
                ))
            } else {
                Ok(())
            }
        };
        need(0, 7, "header")?;
        if &bytes[0..4] != MAGIC {
            return Err(corrupt(0, "bad magic (expected DSQT)".into()));
        }
        if bytes[4] != VERSION {
            return Err(corrupt(4, format!("unsupported version {}", bytes[4])));
        }
        let dtype = DType::from_code(bytes[5]).ok_or_else(|| corrupt(5, format!("unknown dtype {}", bytes[5])))?;
        let rank = bytes[6] as usize;
        let mut pos = 7;
        need(pos, 8 * rank, "dims")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("8 bytes"));
            shape.push(d as usize);
            pos += 8;
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt(7, "dims overflow".into()))?;
        let payload = n
            .checked_mul(dtype.size())
            .ok_or_else(|| corrupt(7, "payload size overflow".into()))?;
        need(pos, payload, "payload")?;
        let p = &bytes[pos..pos + payload];
        let data = match dtype {
            DType::F32 => TensorData::F32(
                p.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                p.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(p.to_vec()),
        };
        Ok((Self { shape, data }, pos + payload))
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path: PathBuf = path.as_ref().to_path_buf();
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (t, used) = Self::decode(&bytes, &path, 0)?;
        if used != bytes.len() {
            return Err(Error::Corrupt {
                path,
                offset: used as u64,
                detail: format!("{} trailing bytes", bytes.len() - used),
            });
        }
        Ok(t)
    }
}
