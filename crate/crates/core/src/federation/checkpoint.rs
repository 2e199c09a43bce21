//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `FDNASCKP`, `u32` version, `u64` round,
//! length-prefixed search-space hash, `u32` entry count, then per entry a
//! length-prefixed id, a `u8` kind code, `u32` rank, `u64` dims and the
//! `f64` values. Optimizer buffers use kind code 255.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{ParamKind, ParamSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FDNASCKP";
const VERSION: u32 = 1;
const EXTRA_KIND: u8 = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Rounds completed.
    pub round: usize,
    pub space_hash: String,
    pub params: ParamSet,
    /// Named flat buffers, e.g. per-device optimizer state.
    pub extra: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.round as u64).to_le_bytes());
        put_str(&mut out, &self.space_hash);
        out.extend_from_slice(&((self.params.len() + self.extra.len()) as u32).to_le_bytes());
        for p in self.params.iter() {
            put_entry(&mut out, &p.id, p.kind.code(), p.tensor.shape(), p.tensor.data());
        }
        for (name, data) in &self.extra {
            put_entry(&mut out, name, EXTRA_KIND, &[data.len()], data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(r.error("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(format!("unsupported checkpoint version {version}")));
        }
        let round = r.u64()? as usize;
        let space_hash = r.string()?;
        let count = r.u32()?;
        let mut params = ParamSet::new();
        let mut extra = BTreeMap::new();
        for _ in 0..count {
            let id = r.string()?;
            let code = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if code == EXTRA_KIND {
                extra.insert(id, data);
                continue;
            }
            let kind = ParamKind::from_code(code).ok_or_else(|| r.error(format!("unknown parameter kind {code}")))?;
            if params.position(&id).is_some() {
                return Err(r.error(format!("duplicate parameter `{id}`")));
            }
            params.register(id, kind, Tensor::new(dims, data)?);
        }
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes"));
        }
        Ok(Checkpoint { round, space_hash, params, extra })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Short content hash used to name derived artifacts.
    pub fn id(&self) -> String {
        hex::encode(&Sha256::digest(self.to_bytes())[..8])
    }

    /// Rejects checkpoints written for a different search space.
    pub fn check_space(&self, space_hash: &str) -> Result<()> {
        if self.space_hash != space_hash {
            return Err(Error::SpaceMismatch { checkpoint: self.space_hash.clone(), config: space_hash.to_string() });
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_entry(out: &mut Vec<u8>, id: &str, code: u8, dims: &[usize], data: &[f64]) {
    put_str(out, id);
    out.push(code);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error(&self, detail: impl Into<String>) -> Error {
        Error::Format { path: self.path.into(), offset: self.pos as u64, detail: detail.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.bytes.len() - self.pos {
            return Err(self.error(format!("truncated: needed {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error("identifier is not UTF-8"))
    }
}
