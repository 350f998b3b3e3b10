//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SGTN" | version: u8 = 1 | count: u32
//! count × { name_len: u32 | name: UTF-8 | rank: u32 | extents: u32 × rank | values: f64 × Π extents }
//! ```

use std::io::{Read, Write};

use super::{Array, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SGTN";
pub const VERSION: u8 = 1;

/// A decoded checkpoint: named arrays in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            records: store
                .iter()
                .map(|(_, p)| (p.name().to_string(), p.value().clone()))
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, value) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.rank() as u32).to_le_bytes());
            for &e in value.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = cur.take(1)?[0];
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {VERSION})"
            )));
        }
        let count = cur.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = cur.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            records.push((name, Array::new(shape, data)?));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last record",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self { records })
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

    /// Copies every record into `store`. Nothing is modified unless every
    /// name and shape matches exactly.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        for (name, value) in &self.records {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            let want = store.value(id).shape();
            if want != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: checkpoint {:?}, model {:?}",
                    value.shape(),
                    want
                )));
            }
        }
        if self.records.len() != store.len() {
            let missing: Vec<&str> = store
                .iter()
                .map(|(_, p)| p.name())
                .filter(|n| !self.records.iter().any(|(r, _)| r == n))
                .collect();
            return Err(Error::Checkpoint(format!(
                "missing parameters: {}",
                missing.join(", ")
            )));
        }
        for (name, value) in &self.records {
            let id = store.id(name).expect("checked above");
            *store.value_mut(id) = value.clone();
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated file: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}
