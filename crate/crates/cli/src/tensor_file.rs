//! TensorFile: a one-line JSON header, a single `\n`, then the raw
//! little-endian payload.
//!
//! ```text
//! {"dtype":"f64","shape":[64,64,64],"order":"row-major"}\n<payload>
//! ```
//!
//! The payload holds exactly `product(shape) * size_of(dtype)` bytes. Round
//! trips are bit-exact, NaN payloads included.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
    order: String,
}

const ROW_MAJOR: &str = "row-major";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| CliError::Format(format!("tensor shape {shape:?} overflows")))
}

impl Tensor {
    pub fn f64(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(values))
    }

    pub fn f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(values))
    }

    fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n = element_count(&shape)?;
        if n != data.len() {
            return Err(CliError::Format(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(CliError::Format(format!("{what}: expected shape {shape:?}, file has {:?}", self.shape)));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header { dtype: self.dtype(), shape: self.shape.clone(), order: ROW_MAJOR.into() };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.reserve(self.len() * self.dtype().size());
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CliError::Format("tensor header is not terminated by a newline".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| CliError::Format(format!("malformed tensor header: {e}")))?;
        if header.order != ROW_MAJOR {
            return Err(CliError::Format(format!("unsupported tensor order '{}'", header.order)));
        }
        let n = element_count(&header.shape)?;
        let payload = &bytes[nl + 1..];
        let expected = n
            .checked_mul(header.dtype.size())
            .ok_or_else(|| CliError::Format("tensor payload size overflows".into()))?;
        if payload.len() != expected {
            return Err(CliError::Format(format!(
                "tensor payload has {} bytes, header implies {expected}",
                payload.len()
            )));
        }
        let data = match header.dtype {
            Dtype::F32 => TensorData::F32(
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
            ),
            Dtype::F64 => TensorData::F64(
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            ),
        };
        Ok(Self { shape: header.shape, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| e.context(path))
    }
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
