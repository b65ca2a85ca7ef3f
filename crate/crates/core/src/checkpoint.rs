//! The `WMBK` checkpoint container.
//!
//! Layout (little-endian): magic `WMBK`, `u32` version 1, a tensor table
//! (`u32` count, then per tensor `u16` name length, UTF-8 name and a tensor
//! record as in `.tns`), a `u32`-length-prefixed UTF-8 block of `key=value`
//! lines, then the optimizer state as a second tensor table.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::io::{encode_record, record_as, Reader};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"WMBK";
const VERSION: u32 = 1;

pub type NamedTensors<T> = Vec<(String, Tensor<T>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar = f32> {
    pub params: NamedTensors<T>,
    /// Ordered `key=value` pairs: model config, training config, counters.
    pub config: Vec<(String, String)>,
    pub optimizer: NamedTensors<T>,
}

fn encode_table<T: Scalar>(table: &NamedTensors<T>, out: &mut Vec<u8>) -> Result<()> {
    let count = u32::try_from(table.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in table {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_record(t, out)?;
    }
    Ok(())
}

fn decode_table<T: Scalar>(r: &mut Reader) -> Result<NamedTensors<T>> {
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        table.push((name.to_string(), record_as(r.record()?)?));
    }
    Ok(table)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        encode_table(&self.params, &mut out)?;
        let text: String = self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let len = u32::try_from(text.len()).map_err(|_| Error::Format("config block too large".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        encode_table(&self.optimizer, &mut out)?;
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing WMBK magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let params = decode_table(&mut r)?;
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        let config = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Format(format!("bad config line {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let optimizer = decode_table(&mut r)?;
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { params, config, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode()?;
        // write then rename, so an interrupted save never clobbers the old file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let ck = Checkpoint::<f32> {
            params: vec![("a.weight".into(), Tensor::from_vec([2, 1], vec![1.5, -0.25]).unwrap())],
            config: vec![("step".into(), "7".into()), ("gate_mode".into(), "add".into())],
            optimizer: vec![("m.a.weight".into(), Tensor::zeros([2, 1]))],
        };
        let bytes = ck.encode().unwrap();
        assert_eq!(&bytes[..4], b"WMBK");
        assert_eq!(Checkpoint::<f32>::decode(&bytes).unwrap(), ck);
        assert_eq!(ck.get("step"), Some("7"));
        assert!(Checkpoint::<f32>::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f64>::decode(&bytes).is_err());
    }
}
