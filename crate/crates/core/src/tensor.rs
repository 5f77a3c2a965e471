//! Dense row-major tensors and the NTF ("neutral tensor format") file layout.
//!
//! Layout, all integers little-endian:
//!
//! | offset      | size        | content                               |
//! |-------------|-------------|---------------------------------------|
//! | 0           | 4           | magic `NTF1`                          |
//! | 4           | 1           | dtype code (0 = f32, 1 = f64, 2 = u8) |
//! | 5           | 1           | ndim                                  |
//! | 6           | 8 * ndim    | extents as u64                        |
//! | 6 + 8*ndim  | elem * count| row-major payload                     |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const NTF_MAGIC: &[u8; 4] = b"NTF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
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

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
        }
    }
}

/// A dense tensor. The shape is never empty and every extent is at least one,
/// so the payload always holds at least one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::Shape("tensor shape must have at least one axis".into()));
    }
    if shape.contains(&0) {
        return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
    }
    if shape.len() > u8::MAX as usize {
        return Err(Error::Shape(format!("too many axes ({})", shape.len())));
    }
    let count: usize = shape.iter().product();
    if count != len {
        return Err(Error::Shape(format!(
            "shape {shape:?} needs {count} values, got {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Tensor { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn zeros_f32(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_f32(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn into_f32(self) -> Option<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    /// Values widened or narrowed to f32 regardless of storage type.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F64(v) => v.iter().map(|&x| x as f32).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        6 + 8 * self.shape.len() + self.dtype().size_of() * self.len()
    }

    pub fn to_ntf_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(NTF_MAGIC);
        out.push(self.dtype().code());
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

    /// Decode an NTF byte buffer. `origin` is only used for error messages.
    pub fn from_ntf_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 6 || &bytes[0..4] != NTF_MAGIC {
            return Err(Error::BadMagic(origin.to_path_buf()));
        }
        let dtype = DType::from_code(bytes[4])?;
        let ndim = bytes[5] as usize;
        let header = 6 + 8 * ndim;
        if bytes.len() < header {
            return Err(Error::SizeMismatch {
                path: origin.to_path_buf(),
                expected: header,
                found: bytes.len(),
            });
        }
        let mut shape = Vec::with_capacity(ndim);
        for chunk in bytes[6..header].chunks_exact(8) {
            let d = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            let d = usize::try_from(d)
                .map_err(|_| Error::Malformed(format!("extent {d} does not fit in memory")))?;
            shape.push(d);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Malformed(format!("shape {shape:?} overflows")))?;
        let payload = &bytes[header..];
        let expected = count
            .checked_mul(dtype.size_of())
            .ok_or_else(|| Error::Malformed(format!("shape {shape:?} overflows")))?;
        if payload.len() != expected {
            return Err(Error::SizeMismatch {
                path: origin.to_path_buf(),
                expected,
                found: payload.len(),
            });
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        Tensor::new(shape, data)
    }
}

pub fn ntf_write(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.to_ntf_bytes()).map_err(|e| Error::io(path, e))
}

pub fn ntf_read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_ntf_bytes(&bytes, path)
}

/// Arithmetic mean of channel `c` of a `[C, H, W]` tensor, accumulated in f64.
pub fn channel_mean(t: &Tensor, c: usize) -> Result<f64> {
    let shape = t.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("expected [C,H,W], got {shape:?}")));
    }
    if c >= shape[0] {
        return Err(Error::OutOfRange(format!(
            "channel {c} of {} channels",
            shape[0]
        )));
    }
    let plane = shape[1] * shape[2];
    let values = t.to_f64_vec();
    Ok(plane_mean_f64(&values[c * plane..(c + 1) * plane]))
}

pub(crate) fn plane_mean_f64(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean of an f32 plane, accumulated in f64.
pub fn plane_mean(values: &[f32]) -> f64 {
    values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64
}
