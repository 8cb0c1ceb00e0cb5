//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `STEP`, `u32` version, then per tensor a
//! `u16` name length, the UTF-8 name, a `u8` rank, `rank` `u32` dimensions
//! and the `f32` data in row-major order; a trailing `u32` holds the tensor
//! count. The JSON configuration travels as the rank-1 tensor `__config`
//! whose values are the blob's bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STEP";
pub const VERSION: u32 = 1;
pub const CONFIG_TENSOR: &str = "__config";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blob = self.config_json.as_bytes();
        let config = Tensor::new(
            vec![blob.len()],
            blob.iter().map(|&b| f32::from(b)).collect(),
        )?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let all = std::iter::once((CONFIG_TENSOR, &config))
            .chain(self.tensors.iter().map(|(n, t)| (n.as_str(), t)));
        let mut count = 0u32;
        for (name, t) in all {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Checkpoint(format!("tensor name {name:?} is too long")))?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::Checkpoint(format!("tensor {name:?} has rank {}", t.rank())))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Checkpoint(format!("tensor {name:?} is too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            count += 1;
        }
        out.extend_from_slice(&count.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a STEP checkpoint".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut config_json = None;
        let mut tensors = Vec::new();
        let mut count = 0u32;
        while bytes.len() - r.pos > 4 {
            let name_len = usize::from(r.u16()?);
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = usize::from(r.take(1)?[0]);
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(
                len.checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)?;
            if name == CONFIG_TENSOR {
                let blob: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
                config_json =
                    Some(String::from_utf8(blob).map_err(|_| {
                        Error::Checkpoint("configuration blob is not UTF-8".into())
                    })?);
            } else {
                tensors.push((name, t));
            }
            count += 1;
        }
        let declared = r.u32()?;
        if declared != count {
            return Err(Error::Checkpoint(format!(
                "trailer declares {declared} tensors, file holds {count}"
            )));
        }
        let config_json = config_json
            .ok_or_else(|| Error::Checkpoint("checkpoint has no configuration".into()))?;
        Ok(Checkpoint {
            config_json,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_json: r#"{"n":5,"name":"é"}"#.into(),
            tensors: vec![
                (
                    "a".into(),
                    Tensor::new(vec![2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 3e8]).unwrap(),
                ),
                ("empty".into(), Tensor::zeros(&[0, 3])),
                (
                    "v".into(),
                    Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap(),
                ),
            ],
        }
    }

    #[test]
    fn bytes_roundtrip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn header_fields() {
        let b = sample().to_bytes().unwrap();
        assert_eq!(&b[..4], b"STEP");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        let n = b.len();
        assert_eq!(u32::from_le_bytes(b[n - 4..].try_into().unwrap()), 4);
    }

    #[test]
    fn bad_magic() {
        let mut b = sample().to_bytes().unwrap();
        b[0] = b'X';
        let err = Checkpoint::from_bytes(&b).unwrap_err().to_string();
        assert!(err.contains("not a STEP checkpoint"), "{err}");
    }

    #[test]
    fn truncated_is_error() {
        let b = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 9]).is_err());
    }
}
