//! Binary checkpoint format.
//!
//! Layout (little-endian): `IDUD`, u32 version, u32 metadata length, metadata
//! JSON, u32 tensor count, then per tensor a u16 name length, the name, a u8
//! rank, u32 dims and the f32 payload. A SHA-256 of everything before it
//! closes the file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IDUD";
pub const VERSION: u32 = 1;
const TRAILER: usize = 32;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint: magic {found:?}")]
    MagicMismatch { found: Vec<u8> },
    #[error("checkpoint version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated at byte {offset} (needed {needed} more)")]
    Truncated { offset: usize, needed: usize },
    #[error("checkpoint content digest mismatch")]
    DigestMismatch,
    #[error("tensor {name}: dims {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub class_names: Vec<String>,
    pub feature_digest: String,
    /// `class` or `role`.
    pub task: String,
    pub run_config_digest: String,
}

pub fn encode_checkpoint(params: &ModelParams, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    params.shape_audit(&meta.model)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let named = params.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let avail = self.bytes.len() - self.pos;
        if avail < n {
            return Err(CheckpointError::Truncated {
                offset: self.bytes.len(),
                needed: n - avail,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams, CheckpointMeta)> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4).map_err(|_| CheckpointError::MagicMismatch { found: bytes.to_vec() })?;
    if magic != MAGIC {
        return Err(CheckpointError::MagicMismatch { found: magic.to_vec() }.into());
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let meta_len = c.u32()? as usize;
    let meta_bytes = c.take(meta_len)?;
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = c.u16()? as usize;
        let name = String::from_utf8(c.take(nlen)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        let rank = c.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| CheckpointError::Malformed("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        tensors.push((name, dims, data));
    }
    let body_end = c.pos;
    let trailer = c.take(TRAILER)?;
    if c.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - c.pos)).into());
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != trailer {
        return Err(CheckpointError::DigestMismatch.into());
    }

    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
    meta.model
        .validate()
        .map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
    let expected = ModelParams::<f32>::expected_shapes(&meta.model);
    if expected.len() != tensors.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} tensors, config implies {}",
            tensors.len(),
            expected.len()
        ))
        .into());
    }
    let mut params = ModelParams::<f32>::init(&meta.model)?;
    for ((slot_name, slot), (name, dims, data)) in params.named_mut().into_iter().zip(tensors) {
        if slot_name != name {
            return Err(CheckpointError::Malformed(format!("expected tensor {slot_name}, found {name}")).into());
        }
        if slot.dims() != dims.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: slot.dims().to_vec(),
                found: dims,
            }
            .into());
        }
        *slot = Tensor::new(dims, data)?;
    }
    params.shape_audit(&meta.model)?;
    Ok((params, meta))
}

pub fn save_checkpoint(params: &ModelParams, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (ModelParams, CheckpointMeta) {
        let cfg = ModelConfig {
            input_dim: 5,
            widths: vec![6, 4],
            d_k: 3,
            group: 2,
            dropout: 0.1,
            classes: 3,
            seed: 9,
        };
        let p = ModelParams::init(&cfg).unwrap();
        let meta = CheckpointMeta {
            model: cfg,
            class_names: vec!["a".into(), "b".into(), "c".into()],
            feature_digest: "abc".into(),
            task: "class".into(),
            run_config_digest: "def".into(),
        };
        (p, meta)
    }

    fn ckpt_err(r: Result<(ModelParams, CheckpointMeta)>) -> CheckpointError {
        match r {
            Err(Error::Checkpoint(e)) => e,
            other => panic!("expected checkpoint error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (p, m) = sample();
        let a = encode_checkpoint(&p, &m).unwrap();
        let (p2, m2) = decode_checkpoint(&a).unwrap();
        assert_eq!(p2, p);
        assert_eq!(m2, m);
        assert_eq!(encode_checkpoint(&p2, &m2).unwrap(), a);
    }

    #[test]
    fn distinct_failures() {
        let (p, m) = sample();
        let good = encode_checkpoint(&p, &m).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(ckpt_err(decode_checkpoint(&bad)), CheckpointError::MagicMismatch { .. }));

        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(
            ckpt_err(decode_checkpoint(&bad)),
            CheckpointError::VersionMismatch { found: 2, expected: 1 }
        );

        for cut in [6, 20, good.len() / 2, good.len() - 1] {
            assert!(matches!(ckpt_err(decode_checkpoint(&good[..cut])), CheckpointError::Truncated { .. }));
        }

        let mut bad = good.clone();
        let n = bad.len();
        bad[n - 40] ^= 0x01;
        assert_eq!(ckpt_err(decode_checkpoint(&bad)), CheckpointError::DigestMismatch);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (p, m) = sample();
        let mut other = m.clone();
        other.model.widths = vec![7, 4];
        let p2 = ModelParams::init(&other.model).unwrap();
        // body written for one config, metadata claiming another
        let mut bytes = encode_checkpoint(&p2, &other).unwrap();
        let json = serde_json::to_vec(&m).unwrap();
        let old_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        bytes.splice(8..12 + old_len, (json.len() as u32).to_le_bytes().into_iter().chain(json));
        bytes.truncate(bytes.len() - 32);
        let d = Sha256::digest(&bytes);
        bytes.extend_from_slice(&d);
        let _ = p;
        assert!(matches!(ckpt_err(decode_checkpoint(&bytes)), CheckpointError::ShapeMismatch { .. }));
    }
}
