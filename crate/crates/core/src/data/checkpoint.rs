//! Binary checkpoints.
//!
//! Layout (little-endian): magic `VJCK`, `u16` version, `u64` step, `u64`
//! seed, config hash and config text as length-prefixed UTF-8, then named
//! sections of named tensors (`u8` rank, `u32` extents, `f32` values). The
//! last 8 bytes are the leading 8 bytes of the SHA-256 of everything before.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::format::write_atomic;
use crate::tensor::{ParamStore, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"VJCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub config_text: String,
    pub sections: Vec<(String, ParamStore<f32>)>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Result<&ParamStore<f32>> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut out, &self.config_hash);
        put_str(&mut out, &self.config_text);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, store) in &self.sections {
            put_str(&mut out, name);
            out.extend_from_slice(&(store.len() as u32).to_le_bytes());
            for (tname, t) in store.iter() {
                put_str(&mut out, tname);
                out.push(t.rank() as u8);
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 2 + 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {version} is not supported (expected {VERSION})"
            )));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 8);
        if checksum(body) != sum {
            return Err(Error::Checkpoint("checksum mismatch: file is corrupt or truncated".into()));
        }
        let mut r = Reader { buf: body, pos: 6 };
        let step = r.u64()?;
        let seed = r.u64()?;
        let config_hash = r.string()?;
        let config_text = r.string()?;
        let nsec = r.u32()? as usize;
        let mut sections = Vec::with_capacity(nsec);
        for _ in 0..nsec {
            let name = r.string()?;
            let count = r.u32()? as usize;
            let mut store = ParamStore::new();
            for _ in 0..count {
                let tname = r.string()?;
                let rank = r.take(1)?[0] as usize;
                let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let n: usize = shape.iter().product();
                let data = r
                    .take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
                store.insert(tname, t);
            }
            sections.push((name, store));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after the last section".into()));
        }
        Ok(Self {
            step,
            seed,
            config_hash,
            config_text,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Checks that `store` holds exactly the tensors named in `shapes`.
pub fn check_names(section: &str, store: &ParamStore<f32>, shapes: &[(String, Vec<usize>)]) -> Result<()> {
    for name in store.names() {
        if !shapes.iter().any(|(n, _)| n == name) {
            return Err(Error::Checkpoint(format!("unknown tensor `{name}` in section `{section}`")));
        }
    }
    for (name, shape) in shapes {
        let t = store
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("section `{section}` lacks tensor `{name}`")))?;
        if t.shape() != &shape[..] {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

fn checksum(bytes: &[u8]) -> [u8; 8] {
    let d = Sha256::digest(bytes);
    d[..8].try_into().unwrap()
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}
