//! Binary checkpoint: magic, version, config echo, named `f32` tensors, CRC32.
//!
//! ```text
//! "ECRF1" | u32 version | u32 config_len | config (UTF-8 key=value lines)
//! | u32 tensor_count | tensors... | u32 crc32(everything before)
//! tensor: u32 name_len | name | u32 ndim | u64 dims[ndim] | f32 data[Π dims]
//! ```
//! All integers and floats little-endian.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"ECRF1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    /// Resolved configuration, in insertion order.
    pub config: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut cfg = String::new();
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("config entry '{k}' cannot be serialized")));
            }
            cfg.push_str(k);
            cfg.push('=');
            cfg.push_str(v);
            cfg.push('\n');
        }
        put_u32(&mut out, cfg.len())?;
        out.extend_from_slice(cfg.as_bytes());
        put_u32(&mut out, self.tensors.len())?;
        for t in &self.tensors {
            if t.dims.iter().product::<usize>() != t.data.len() {
                return Err(Error::Dimension(format!("tensor '{}' dims {:?} hold {} values", t.name, t.dims, t.data.len())));
            }
            put_u32(&mut out, t.name.len())?;
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.dims.len())?;
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut r = Reader { bytes, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        if bytes.len() < r.pos + 4 {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Format("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: r.pos };
        let cfg_len = r.u32()? as usize;
        let cfg = std::str::from_utf8(r.take(cfg_len)?).map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        let config = cfg
            .lines()
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Format(format!("config line without '=': {l}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor '{name}' is too large")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: vec![("mode".into(), "ecrf".into()), ("lr0".into(), "0.01".into())],
            tensors: vec![
                NamedTensor { name: "a".into(), dims: vec![2, 3], data: vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25] },
                NamedTensor { name: "b".into(), dims: vec![1], data: vec![0.1] },
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact_and_deterministic() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(bytes, c.to_bytes().unwrap());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        for (x, y) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(x.dims, y.dims);
            assert!(x.data.iter().zip(&y.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(back.config, c.config);
    }

    #[test]
    fn rejects_bad_input() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut future = bytes.clone();
        future[5..9].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&future), Err(Error::Version(2))));
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Format(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 6]).is_err());
    }
}
