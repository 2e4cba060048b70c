//! Self-describing little-endian tensor container.
//!
//! Layout: 8-byte magic, `u32` version, 32-byte config hash, `u64` tensor
//! count, then per tensor: `u32` name length, UTF-8 name, `u8` dtype, `u8`
//! rank, `u64` extents, row-major payload. Tensors are written in name order.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RKFGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F64(_) => 0,
            TensorData::I64(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn f64(dims: &[usize], data: Vec<f64>) -> Self {
        Self {
            dims: dims.to_vec(),
            data: TensorData::F64(data),
        }
    }

    pub fn i64(data: Vec<i64>) -> Self {
        Self {
            dims: vec![data.len()],
            data: TensorData::I64(data),
        }
    }

    pub fn bytes(data: Vec<u8>) -> Self {
        Self {
            dims: vec![data.len()],
            data: TensorData::U8(data),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub tensors: BTreeMap<String, NamedTensor>,
}

/// SHA-256 of `text`.
pub fn hash_text(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::data(format!("checkpoint truncated at byte {}", self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new(config_hash: [u8; 32]) -> Self {
        Self {
            config_hash,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: NamedTensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::data(format!("checkpoint lacks tensor `{name}`")))
    }

    pub fn f64s(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let t = self.get(name)?;
        match &t.data {
            TensorData::F64(v) => Ok((&t.dims, v)),
            _ => Err(Error::data(format!("tensor `{name}` is not f64"))),
        }
    }

    pub fn i64s(&self, name: &str) -> Result<&[i64]> {
        match &self.get(name)?.data {
            TensorData::I64(v) => Ok(v),
            _ => Err(Error::data(format!("tensor `{name}` is not i64"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.get(name)?.data {
            TensorData::U8(v) => Ok(v),
            _ => Err(Error::data(format!("tensor `{name}` is not u8"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        std::str::from_utf8(self.bytes(name)?).map_err(|_| Error::data(format!("tensor `{name}` is not UTF-8")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend((self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            let count: usize = t.dims.iter().product();
            if count != t.data.len() {
                return Err(Error::shape(format!(
                    "tensor `{name}`: extents {:?} hold {count} values, payload has {}",
                    t.dims,
                    t.data.len()
                )));
            }
            if t.dims.len() > u8::MAX as usize {
                return Err(Error::arg(format!("tensor `{name}` has too many dimensions")));
            }
            out.extend((name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.data.tag());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend((d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F64(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
                TensorData::I64(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::data("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u64()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::data("tensor name is not UTF-8"))?
                .to_string();
            let tag = r.u8()?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= bytes.len())
                .ok_or_else(|| Error::data(format!("tensor `{name}` has implausible extents {dims:?}")))?;
            let data = match tag {
                0 => TensorData::F64(
                    r.take(n * 8)?
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                        .collect(),
                ),
                1 => TensorData::I64(
                    r.take(n * 8)?
                        .chunks_exact(8)
                        .map(|b| i64::from_le_bytes(b.try_into().expect("8 bytes")))
                        .collect(),
                ),
                2 => TensorData::U8(r.take(n)?.to_vec()),
                other => return Err(Error::data(format!("tensor `{name}` has unknown dtype {other}"))),
            };
            if tensors.insert(name.clone(), NamedTensor { dims, data }).is_some() {
                return Err(Error::data(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::data("trailing bytes after the last tensor"));
        }
        Ok(Self { config_hash, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
