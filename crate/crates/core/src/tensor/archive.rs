//! Binary checkpoint format.
//!
//! A single-tensor file is the magic `PRK1` followed by one tensor record.
//! A named-tensor archive is the same magic followed by zero or more
//! `(name, record)` pairs, where the name is a little-endian `u32` byte
//! length plus UTF-8 bytes. A tensor record is `u32` rank, `rank` × `u32`
//! extents, then the little-endian `f64` payload in row-major order.

use std::collections::BTreeMap;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PRK1";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("extent exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

/// Appends one tensor record (no magic).
pub fn write_record(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.rank());
    for &d in t.shape() {
        put_u32(out, d);
    }
    out.reserve(t.numel() * 8);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("tensor archive", "unexpected end of data"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn magic(&mut self) -> Result<()> {
        if self.take(4)? != MAGIC {
            return Err(Error::format("tensor archive", "bad magic, expected PRK1"));
        }
        Ok(())
    }

    fn record(&mut self) -> Result<Tensor> {
        let rank = self.u32()?;
        if rank > 8 {
            return Err(Error::format("tensor archive", format!("implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("tensor archive", "extent overflow"))?;
        let payload = self.take(n.checked_mul(8).ok_or_else(|| {
            Error::format("tensor archive", "extent overflow")
        })?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(&shape, data).map_err(|e| Error::format("tensor archive", e.to_string()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Serializes a single tensor with its magic header.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    write_record(&mut out, t);
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic()?;
    let t = r.record()?;
    if !r.done() {
        return Err(Error::format("tensor archive", "trailing bytes"));
    }
    Ok(t)
}

/// Name-ordered collection of tensors; iteration and encoding are sorted by
/// name, so equal contents always encode to equal bytes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: BTreeMap<String, Tensor>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::format("tensor archive", format!("missing tensor {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar values held.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for (name, t) in &self.entries {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            write_record(&mut out, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        r.magic()?;
        let mut entries = BTreeMap::new();
        while !r.done() {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format("tensor archive", "name is not UTF-8"))?
                .to_owned();
            let t = r.record()?;
            if entries.insert(name.clone(), t).is_some() {
                return Err(Error::format("tensor archive", format!("duplicate name {name:?}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl FromIterator<(String, Tensor)> for TensorArchive {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}
