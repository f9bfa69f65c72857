//! `HRMT` tensors: magic, version, ndim, dims, dtype, then a little-endian
//! row-major payload.

use std::io::{Read, Write};

use half::f16;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"HRMT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F16 = 0,
    F32 = 1,
    F64 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F16 => 2,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(DType::F16),
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            c => Err(CliError::format(format!("unknown dtype code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F16(Vec<f16>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F16(_) => DType::F16,
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F16(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F16(v) => v.iter().map(|x| x.to_f64()).collect(),
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let count = element_count(&dims)?;
        if count != data.len() as u64 {
            return Err(CliError::Shape(format!(
                "dims {dims:?} hold {count} elements, payload has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    /// Interprets the file as a matrix; 1-D tensors become a single row.
    pub fn to_matrix(&self) -> Result<harmonia_core::Tensor> {
        let (rows, cols) = match self.dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            d => {
                return Err(CliError::Shape(format!(
                    "expected 1 or 2 dims, got {}",
                    d.len()
                )))
            }
        };
        Ok(harmonia_core::Tensor::new(
            rows as usize,
            cols as usize,
            self.data.to_f64(),
        )?)
    }

    /// Splits along the leading axis; 2-D tensors yield themselves.
    pub fn to_matrices(&self) -> Result<Vec<harmonia_core::Tensor>> {
        match self.dims.as_slice() {
            [_] | [_, _] => Ok(vec![self.to_matrix()?]),
            [n, r, c] => {
                let (r, c) = (*r as usize, *c as usize);
                let all = self.data.to_f64();
                (0..*n as usize)
                    .map(|i| {
                        let chunk = all[i * r * c..(i + 1) * r * c].to_vec();
                        Ok(harmonia_core::Tensor::new(r, c, chunk)?)
                    })
                    .collect()
            }
            d => Err(CliError::Shape(format!(
                "expected 1 to 3 dims, got {}",
                d.len()
            ))),
        }
    }

    pub fn from_matrix_f64(t: &harmonia_core::Tensor) -> Self {
        Self {
            dims: vec![t.rows() as u64, t.cols() as u64],
            data: TensorData::F64(t.data().to_vec()),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&(self.data.dtype() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * self.data.dtype().size());
        match &self.data {
            TensorData::F16(v) => v
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
        w.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(CliError::format("bad magic, expected HRMT"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CliError::format(format!("unsupported version {version}")));
        }
        let ndim = r.u32()?;
        if ndim == 0 || ndim > 8 {
            return Err(CliError::format(format!("bad ndim {ndim}")));
        }
        let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let dtype = DType::from_code(r.u32()?)?;
        let count = element_count(&dims).map_err(|_| CliError::format("dims overflow"))?;
        let expected = count
            .checked_mul(dtype.size() as u64)
            .ok_or_else(|| CliError::format("dims overflow"))?;
        if r.remaining() as u64 != expected {
            return Err(CliError::format(format!(
                "payload is {} bytes, dims need {expected}",
                r.remaining()
            )));
        }
        let payload = r.take(expected as usize)?;
        let data = match dtype {
            DType::F16 => TensorData::F16(
                payload
                    .chunks_exact(2)
                    .map(|b| f16::from_le_bytes([b[0], b[1]]))
                    .collect(),
            ),
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Self { dims, data })
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| CliError::format(format!("read failed: {e}")))?;
        Self::from_bytes(&bytes)
    }
}

fn element_count(dims: &[u64]) -> Result<u64> {
    dims.iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| CliError::Shape("dims overflow".into()))
}

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(CliError::format("unexpected end of file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
