//! SPAT tensor files.
//!
//! ```text
//! "SPAT" | version u8 = 1 | dtype u8 | rank u8 | rank x dim u64 LE | payload LE
//! ```
//!
//! dtype codes: 0 binary16, 1 binary32, 2 binary64.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::fp::Half;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SPAT";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F16 = 0,
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F16),
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::BadDtype(other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SpatTensor {
    F16(Tensor<Half>),
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl SpatTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            SpatTensor::F16(_) => Dtype::F16,
            SpatTensor::F32(_) => Dtype::F32,
            SpatTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            SpatTensor::F16(t) => t.shape(),
            SpatTensor::F32(t) => t.shape(),
            SpatTensor::F64(t) => t.shape(),
        }
    }

    /// The tensor as binary16, or a dtype error.
    pub fn into_half(self) -> Result<Tensor<Half>> {
        match self {
            SpatTensor::F16(t) => Ok(t),
            other => Err(Error::BadDtype(other.dtype() as u8)),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let shape = self.shape();
        let count: usize = shape.iter().product();
        let mut out = Vec::with_capacity(7 + 8 * shape.len() + count * self.dtype().size());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&[VERSION, self.dtype() as u8, shape.len() as u8]);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match self {
            SpatTensor::F16(t) => t.as_slice().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            SpatTensor::F32(t) => t.as_slice().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            SpatTensor::F64(t) => t.as_slice().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let eof = || Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated SPAT header"));
        let header = bytes.get(..7).ok_or_else(eof)?;
        let magic: [u8; 4] = header[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if header[4] != VERSION {
            return Err(Error::BadVersion(header[4]));
        }
        let dtype = Dtype::from_code(header[5])?;
        let rank = header[6] as usize;
        if rank == 0 {
            return Err(Error::ZeroDimension);
        }
        let dims_end = 7 + 8 * rank;
        let dim_bytes = bytes.get(7..dims_end).ok_or_else(eof)?;
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for chunk in dim_bytes.chunks_exact(8) {
            let d = u64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            if d == 0 {
                return Err(Error::ZeroDimension);
            }
            let d = usize::try_from(d).map_err(|_| Error::DimensionOverflow)?;
            count = count.checked_mul(d).ok_or(Error::DimensionOverflow)?;
            shape.push(d);
        }
        let expected = count.checked_mul(dtype.size()).ok_or(Error::DimensionOverflow)?;
        let payload = &bytes[dims_end..];
        if payload.len() != expected {
            return Err(Error::PayloadLength {
                expected,
                found: payload.len(),
            });
        }
        Ok(match dtype {
            Dtype::F16 => SpatTensor::F16(Tensor::from_vec(
                &shape,
                payload
                    .chunks_exact(2)
                    .map(|c| Half::from_le_bytes(c.try_into().expect("2 bytes")))
                    .collect(),
            )?),
            Dtype::F32 => SpatTensor::F32(Tensor::from_vec(
                &shape,
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            )?),
            Dtype::F64 => SpatTensor::F64(Tensor::from_vec(
                &shape,
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            )?),
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
