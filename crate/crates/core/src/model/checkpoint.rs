//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `SKQE`, `u32` version, `u32` header length and a `key=value` header,
//! entity then relation names (`u32` count, each `u32` length + UTF-8),
//! `u32` tensor count and per tensor `u32` rank, `u64` axes and `f64` data
//! in [`Param`](super::Param) order, then a SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ModelConfig, ModelError, ModelParams};
use crate::autodiff::Tensor;
use crate::kg::Vocab;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SKQE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}")]
    Io { path: String, source: io::Error },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint content hash does not match its trailer")]
    HashMismatch,
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Model config keys plus whatever the writer adds (training settings,
    /// `graph_hash`).
    pub header: BTreeMap<String, String>,
    pub entities: Vocab,
    pub relations: Vocab,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Header(e.to_string()))
    }
    fn names(&mut self) -> Result<Vocab, CheckpointError> {
        let n = self.u32()? as usize;
        let names = (0..n).map(|_| self.string()).collect::<Result<Vec<_>, _>>()?;
        Ok(Vocab::from_names(names))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn new(params: ModelParams, entities: Vocab, relations: Vocab, extra: BTreeMap<String, String>) -> Self {
        let mut header = extra;
        header.extend(params.config.to_pairs());
        Self { params, header, entities, relations }
    }

    pub fn graph_hash(&self) -> Option<&str> {
        self.header.get("graph_hash").map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header: String = self.header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_str(&mut out, &header);
        for vocab in [&self.entities, &self.relations] {
            out.extend_from_slice(&(vocab.len() as u32).to_le_bytes());
            for name in vocab.names() {
                put_str(&mut out, name);
            }
        }
        let tensors = self.params.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &a in t.shape() {
                out.extend_from_slice(&(a as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 4 + 4 + 32 {
            return Err(CheckpointError::Truncated);
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        if Sha256::digest(body).as_slice() != trailer {
            return Err(CheckpointError::HashMismatch);
        }
        let text = r.string()?;
        let mut header = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| CheckpointError::Header(line.to_owned()))?;
            header.insert(k.to_owned(), v.to_owned());
        }
        let entities = r.names()?;
        let relations = r.names()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|a| a as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor::new(shape, data).map_err(ModelError::from)?);
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Header("trailing bytes".into()));
        }
        let config = ModelConfig::from_map(&header)?;
        let params = ModelParams::from_tensors(config, tensors)?;
        if params.num_entities() != entities.len() || params.num_relations() != relations.len() {
            return Err(CheckpointError::Header("vocabulary sizes disagree with tables".into()));
        }
        Ok(Self { params, header, entities, relations })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes =
            fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = ModelConfig { dim: 4, hidden: 6, ..ModelConfig::desk() };
        let params = ModelParams::init(config, 3, 2, 1);
        let mut extra = BTreeMap::new();
        extra.insert("graph_hash".to_owned(), "abc".to_owned());
        Checkpoint::new(params, Vocab::from_names(["x", "y", "z"]), Vocab::from_names(["p", "q"]), extra)
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"SKQE");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.graph_hash(), Some("abc"));
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::HashMismatch)));
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(CheckpointError::BadMagic)));
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
