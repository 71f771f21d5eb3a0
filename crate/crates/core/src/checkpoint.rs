//! Binary tensor container used for checkpoints, feature-net weights and
//! the preprocessed dataset cache.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic  "FILACKPT"
//! version
//! header_len, header bytes      UTF-8 `key=value` lines
//! tensor_count
//! per tensor:
//!   name_len, name bytes
//!   rank, dims[rank]
//!   f32 LE values, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::NetworkParams;
use crate::tape::RunningStats;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FILACKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub header: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.header.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header.get(key).map(String::as_str).ok_or_else(|| Error::Checkpoint(format!("missing header key {key}")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| Error::Checkpoint(format!("bad value for {key}: {v:?}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    /// Store parameters under `prefix/` and running stats under `prefix.stats/`.
    pub fn insert_params(&mut self, prefix: &str, params: &NetworkParams) {
        for (k, t) in &params.tensors {
            self.insert(format!("{prefix}/{k}"), t.clone());
        }
        for (k, s) in &params.stats {
            self.insert(format!("{prefix}.stats/{k}/mean"), Tensor::from_vec(s.mean.clone()));
            self.insert(format!("{prefix}.stats/{k}/var"), Tensor::from_vec(s.var.clone()));
        }
    }

    pub fn extract_params(&self, prefix: &str) -> Result<NetworkParams> {
        let mut params = NetworkParams::new();
        let tp = format!("{prefix}/");
        let sp = format!("{prefix}.stats/");
        for (k, t) in &self.tensors {
            if let Some(name) = k.strip_prefix(&tp) {
                params.insert(name, t.clone());
            } else if let Some(rest) = k.strip_prefix(&sp) {
                if let Some(layer) = rest.strip_suffix("/mean") {
                    let var = self.tensor(&format!("{sp}{layer}/var"))?;
                    params
                        .stats
                        .insert(layer.to_string(), RunningStats { mean: t.data().to_vec(), var: var.data().to_vec() });
                }
            }
        }
        if params.tensors.is_empty() {
            return Err(Error::Checkpoint(format!("no parameters under {prefix:?}")));
        }
        Ok(params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let mut header = String::new();
        for (k, v) in &self.header {
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(header.as_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header_text =
            std::str::from_utf8(r.take(hlen)?).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let mut header = BTreeMap::new();
        for line in header_text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Checkpoint(format!("bad header line {line:?}")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let mut c = Container::new();
        c.set("a", 1);
        c.insert("t", Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap());
        let b = c.to_bytes();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"FILACKPT");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&4u32.to_le_bytes());
        expected.extend_from_slice(b"a=1\n");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(b"t");
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, expected);
    }

    #[test]
    fn truncated_and_corrupt_rejected() {
        let mut c = Container::new();
        c.insert("x", Tensor::ones(&[3]));
        let b = c.to_bytes();
        assert!(Container::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
    }

    #[test]
    fn params_with_stats_round_trip() {
        let mut p = NetworkParams::new();
        p.insert("l/kernel", Tensor::full(&[2, 2], 0.5));
        p.add_batch_norm("l/bn", 2);
        p.stats.get_mut("l/bn").unwrap().mean[1] = 3.0;
        let mut c = Container::new();
        c.insert_params("gen", &p);
        let back = Container::from_bytes(&c.to_bytes()).unwrap().extract_params("gen").unwrap();
        assert_eq!(back, p);
    }

    proptest! {
        #[test]
        fn bytes_round_trip(vals in proptest::collection::vec(-1e6f32..1e6, 1..40), key in "[a-z]{1,8}") {
            let mut c = Container::new();
            c.set(&key, "v=1");
            c.insert("w", Tensor::from_vec(vals));
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
