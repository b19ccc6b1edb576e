//! Binary container for named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "EMOVCKPT"
//! version    u32
//! manifest   u64 length, then UTF-8 JSON
//! payload    u64 length, then f64 values
//! ```
//!
//! The manifest records the model kind, training step, a config hash,
//! free-form metadata and each tensor's name, shape and byte offset into the
//! payload.

use std::collections::BTreeMap;
use std::path::Path;

use emovc_numerics::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"EMOVCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("format version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),
    #[error("checkpoint holds a `{found}` model, expected `{expected}`")]
    WrongKind { found: String, expected: String },
    #[error("checkpoint does not fit the model: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type CkResult<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

impl TensorEntry {
    fn byte_len(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64 * 8
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub step: u64,
    pub config_hash: String,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    payload: Vec<f64>,
}

/// Hex SHA-256 of a config's canonical text.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> CkResult<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len());
    match end {
        Some(end) => {
            let s = &bytes[*at..end];
            *at = end;
            Ok(s)
        }
        None if what == "payload" => Err(CheckpointError::TruncatedPayload(format!(
            "need {n} bytes at offset {at}, file has {}",
            bytes.len()
        ))),
        None => Err(CheckpointError::CorruptManifest(format!("file ends inside the {what}"))),
    }
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, step: u64, config_hash: impl Into<String>) -> Self {
        Self {
            manifest: Manifest {
                kind: kind.into(),
                step,
                config_hash: config_hash.into(),
                metadata: BTreeMap::new(),
                tensors: Vec::new(),
            },
            payload: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.manifest.metadata.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.manifest.metadata.get(key).map(String::as_str)
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.manifest.tensors.push(TensorEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
            offset: self.payload.len() as u64 * 8,
        });
        self.payload.extend_from_slice(t.data());
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.manifest.tensors.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        let e = self.manifest.tensors.iter().find(|e| e.name == name)?;
        let start = (e.offset / 8) as usize;
        let len = (e.byte_len() / 8) as usize;
        Tensor::new(e.shape.clone(), self.payload[start..start + len].to_vec()).ok()
    }

    pub fn require(&self, name: &str) -> CkResult<Tensor> {
        self.get(name)
            .ok_or_else(|| CheckpointError::Incompatible(format!("missing tensor `{name}`")))
    }

    pub fn expect_kind(&self, kind: &str) -> CkResult<()> {
        if self.manifest.kind != kind {
            return Err(CheckpointError::WrongKind {
                found: self.manifest.kind.clone(),
                expected: kind.into(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(28 + manifest.len() + self.payload.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.payload.len() as u64 * 8).to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CkResult<Self> {
        let mut at = 0;
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        at += MAGIC.len();
        let version = u32::from_le_bytes(take(bytes, &mut at, 4, "header")?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mlen = u64::from_le_bytes(take(bytes, &mut at, 8, "header")?.try_into().expect("8 bytes"));
        let mlen = usize::try_from(mlen).map_err(|_| CheckpointError::CorruptManifest("manifest length overflows".into()))?;
        let mbytes = take(bytes, &mut at, mlen, "manifest")?;
        let manifest: Manifest =
            serde_json::from_slice(mbytes).map_err(|e| CheckpointError::CorruptManifest(e.to_string()))?;
        let plen = u64::from_le_bytes(take(bytes, &mut at, 8, "manifest")?.try_into().expect("8 bytes"));

        let mut expected_end = 0u64;
        for e in &manifest.tensors {
            if e.offset != expected_end {
                return Err(CheckpointError::CorruptManifest(format!(
                    "tensor `{}` starts at {}, expected {expected_end}",
                    e.name, e.offset
                )));
            }
            expected_end += e.byte_len();
        }
        if expected_end != plen {
            return Err(CheckpointError::CorruptManifest(format!(
                "manifest describes {expected_end} payload bytes, header says {plen}"
            )));
        }
        let plen = usize::try_from(plen).map_err(|_| CheckpointError::CorruptManifest("payload length overflows".into()))?;
        let raw = take(bytes, &mut at, plen, "payload")?;
        if at != bytes.len() {
            return Err(CheckpointError::CorruptManifest(format!(
                "{} trailing bytes after the payload",
                bytes.len() - at
            )));
        }
        let payload = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { manifest, payload })
    }

    pub fn save(&self, path: &Path) -> CkResult<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> CkResult<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Append every parameter of `store` under `prefix`.
    pub fn push_params(&mut self, prefix: &str, store: &ParamStore) {
        for (_, name, t) in store.iter() {
            self.push(format!("{prefix}{name}"), t);
        }
    }

    /// Overwrite every parameter of `store` from tensors under `prefix`;
    /// names and shapes must match.
    pub fn load_params(&self, prefix: &str, store: &mut ParamStore) -> CkResult<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.name(id));
            let t = self.require(&name)?;
            if t.shape() != store.get(id).shape() {
                return Err(CheckpointError::Incompatible(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store
                .assign(id, t.data())
                .map_err(|e| CheckpointError::Incompatible(e.to_string()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("test", 3, config_hash("a = 1"));
        c.set_meta("note", "x");
        c.push("w", &Tensor::from_fn(2, 3, |i, j| i as f64 - j as f64 * 0.1));
        c.push("b", &Tensor::scalar(-0.0));
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), c.to_bytes());
        assert_eq!(back.get("w"), c.get("w"));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut b = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&b[..b.len() - 4]),
            Err(CheckpointError::TruncatedPayload(_))
        ));
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn hash_is_hex_sha256() {
        assert_eq!(
            config_hash(""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
