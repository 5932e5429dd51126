//! Manifest + 32-bit float blob container shared by checkpoints, the frozen
//! LM and the representation cache.
//!
//! Layout: 8-byte magic `DEPBLOB1`, `u64` LE manifest length, UTF-8 JSON
//! manifest, then every tensor's values as little-endian `f32` in manifest
//! order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::hash::sha256_hex;
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"DEPBLOB1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    version: u32,
    meta: Value,
    tensors: Vec<TensorEntry>,
    blob_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobFile {
    pub kind: String,
    pub version: u32,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn blob_bytes(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let total: usize = tensors.iter().map(|(_, t)| t.numel()).sum();
    let mut out = Vec::with_capacity(total * 4);
    for (_, t) in tensors {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

impl BlobFile {
    pub fn new(kind: &str, version: u32, meta: Value) -> Self {
        Self {
            kind: kind.into(),
            version,
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    /// SHA-256 over the `f32` payload.
    pub fn payload_hash(&self) -> String {
        sha256_hex(&blob_bytes(&self.tensors))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("{}: missing tensor {name}", self.kind)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let blob = blob_bytes(&self.tensors);
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    len: t.numel(),
                };
                offset += t.numel();
                e
            })
            .collect();
        let manifest = Manifest {
            kind: self.kind.clone(),
            version: self.version,
            meta: self.meta.clone(),
            tensors,
            blob_sha256: sha256_hex(&blob),
        };
        let m = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + m.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(m.len() as u64).to_le_bytes());
        out.extend_from_slice(&m);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8], expected_kind: &str) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("{expected_kind}: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + mlen).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| bad(&format!("manifest: {e}")))?;
        if manifest.kind != expected_kind {
            return Err(bad(&format!("unexpected kind {}", manifest.kind)));
        }
        let blob = &bytes[16 + mlen..];
        if sha256_hex(blob) != manifest.blob_sha256 {
            return Err(bad("payload hash mismatch"));
        }
        let floats: Vec<f64> = blob
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let data = floats
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| bad("tensor outside payload"))?
                .to_vec();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            kind: manifest.kind,
            version: manifest.version,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, expected_kind: &str) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected_kind)
    }
}
