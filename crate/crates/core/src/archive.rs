//! Binary embedding archive.
//!
//! Layout, little-endian: magic `SVEB`, version `u32`, dim `u32`, count `u64`,
//! then per record an id byte length `u16`, the UTF-8 id and `dim` `f32` values.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SVEB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingArchive {
    pub dim: usize,
    pub records: Vec<(String, Vec<f32>)>,
}

impl EmbeddingArchive {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::Archive(format!(
                "record {id} has dim {}, archive dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if id.len() > usize::from(u16::MAX) {
            return Err(Error::Archive(format!("id of {} bytes is too long", id.len())));
        }
        self.records.push((id, vector));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn index(&self) -> HashMap<String, usize> {
        self.records.iter().enumerate().map(|(i, (id, _))| (id.clone(), i)).collect()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.records.iter().find(|(k, _)| k == id).map(|(_, v)| v.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.records.len() * (self.dim * 4 + 16));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (id, v) in &self.records {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Archive("bad magic, expected SVEB".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Archive(format!("unsupported archive version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        let mut archive = EmbeddingArchive::new(dim);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let len = usize::from(r.u16()?);
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Archive("record id is not UTF-8".into()))?
                .to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::Archive(format!("duplicate record id {id}")));
            }
            let raw = r.take(dim * 4)?;
            let v = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            archive.records.push((id, v));
        }
        if r.pos != bytes.len() {
            return Err(Error::Archive(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(archive)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Archive(format!("truncated input at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_layout() {
        let mut a = EmbeddingArchive::new(2);
        a.push("ab", vec![1.0, -0.5]).unwrap();
        let b = a.to_bytes();
        let mut expect = b"SVEB".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&2u16.to_le_bytes());
        expect.extend_from_slice(b"ab");
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn corrupt_inputs() {
        let mut a = EmbeddingArchive::new(3);
        a.push("x", vec![1.0, 2.0, 3.0]).unwrap();
        assert!(a.push("y", vec![1.0]).is_err());
        let b = a.to_bytes();
        assert!(EmbeddingArchive::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(EmbeddingArchive::from_bytes(&bad).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(EmbeddingArchive::from_bytes(&extra).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(ids in proptest::collection::btree_set("[a-z0-9_/-]{1,12}", 0..8),
                     dim in 1usize..6, seed in any::<u32>()) {
            let mut a = EmbeddingArchive::new(dim);
            for (i, id) in ids.iter().enumerate() {
                let v = (0..dim).map(|j| ((seed as usize + i * 31 + j) % 97) as f32 / 7.0 - 3.0).collect();
                a.push(id.clone(), v).unwrap();
            }
            prop_assert_eq!(EmbeddingArchive::from_bytes(&a.to_bytes()).unwrap(), a);
        }
    }
}
