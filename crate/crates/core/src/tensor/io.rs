//! The `.tns` tensor container.
//!
//! Layout: magic `TNSR`, `u32` version (1), `u8` dtype tag (0 = f32,
//! 1 = f64), `u8` ndim, `ndim × u64` dims, then the row-major payload.
//! All integers and values are little-endian.

use std::path::Path;

use super::{numel, DType, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u32 = 1;

/// A tensor of either supported dtype, as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }
}

/// Appends `dtype, ndim, dims, payload` for `t`.
pub(crate) fn encode_record<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} exceeds 255", t.ndim())));
    }
    out.push(T::DTYPE.tag());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    T::extend_le_bytes(t.data(), out);
    Ok(())
}

/// Byte cursor over an in-memory buffer.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated input at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn record(&mut self) -> Result<AnyTensor> {
        let tag = self.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = self.u64()?;
            shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("element count overflows".into()))?;
        let bytes = self.take(count.checked_mul(dtype.size_of()).ok_or_else(|| Error::Format("payload size overflows".into()))?)?;
        debug_assert_eq!(numel(&shape), count);
        Ok(match dtype {
            DType::F32 => AnyTensor::F32(Tensor::from_vec(shape, f32::read_le_bytes(bytes))?),
            DType::F64 => AnyTensor::F64(Tensor::from_vec(shape, f64::read_le_bytes(bytes))?),
        })
    }
}

pub(crate) fn record_as<T: Scalar>(any: AnyTensor) -> Result<Tensor<T>> {
    match any {
        AnyTensor::F32(t) if T::DTYPE == DType::F32 => Ok(t.cast()),
        AnyTensor::F64(t) if T::DTYPE == DType::F64 => Ok(t.cast()),
        other => Err(Error::Format(format!(
            "expected dtype {:?}, found {:?}",
            T::DTYPE,
            other.dtype()
        ))),
    }
}

pub fn encode_tns<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + t.numel() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    encode_record(t, &mut out)?;
    Ok(out)
}

pub fn decode_tns(bytes: &[u8]) -> Result<AnyTensor> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("missing TNSR magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported .tns version {version}")));
    }
    let t = r.record()?;
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(t)
}

pub fn write_tns<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_tns(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tns_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tns(&bytes)
}

/// Reads a tensor that must already be stored with dtype `T`.
pub fn read_tns<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    record_as(read_tns_any(path)?)
}
