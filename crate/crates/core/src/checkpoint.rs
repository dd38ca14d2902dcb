//! Checkpoint bundles.
//!
//! Layout: the 8-byte magic `SINVCKPT`, a little-endian `u64` metadata length,
//! the UTF-8 JSON metadata, then every tensor as little-endian `f32` in
//! manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SINVCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub version: u32,
    /// What the bundle holds, e.g. `decoder` or `styleinv`.
    pub kind: String,
    /// The run configuration that produced the bundle, as `key = value` pairs.
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
    /// Checksum of the parent decoder for style-transfer children.
    pub parent_checksum: Option<String>,
    pub checksum: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle {
    pub kind: String,
    pub config: BTreeMap<String, String>,
    pub tensors: ParamStore<f32>,
    pub parent_checksum: Option<String>,
    pub extra: BTreeMap<String, String>,
}

/// SHA-256 over names, shapes and `f32` bytes of every tensor, in name order.
pub fn checksum<T: Scalar>(params: &ParamStore<T>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update((v.re_f64() as f32).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl CheckpointBundle {
    pub fn new(kind: impl Into<String>, config: BTreeMap<String, String>) -> Self {
        Self { kind: kind.into(), config, tensors: ParamStore::new(), parent_checksum: None, extra: BTreeMap::new() }
    }

    /// Adds tensors, rounded to `f32`.
    pub fn add<T: Scalar>(&mut self, params: &ParamStore<T>) {
        self.tensors.extend(params.cast());
    }

    pub fn add_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.tensors.insert(name, t.cast());
    }

    /// Tensors whose names start with `prefix`, cast to `T`.
    pub fn select<T: Scalar>(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (n, t) in self.tensors.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(n, t.cast());
        }
        out
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.tensors
            .get(name)
            .map(|t| t.cast())
            .ok_or_else(|| Error::Checkpoint(format!("{} bundle has no tensor {name:?}", self.kind)))
    }

    pub fn checksum(&self) -> String {
        checksum(&self.tensors)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Metadata {
            version: VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry { name: n.to_string(), shape: t.shape().to_vec(), dtype: "f32".into() })
                .collect(),
            parent_checksum: self.parent_checksum.clone(),
            checksum: self.checksum(),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec_pretty(&meta).expect("metadata serialises");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.tensors.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.tensors.iter() {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint bundle (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad("truncated metadata".into()))?;
        let meta: Metadata = serde_json::from_slice(body).map_err(|e| bad(format!("metadata: {e}")))?;
        if meta.version != VERSION {
            return Err(bad(format!("unsupported bundle version {}", meta.version)));
        }
        let mut pos = 16 + len;
        let mut tensors = ParamStore::new();
        for e in &meta.tensors {
            if e.dtype != "f32" {
                return Err(bad(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad(format!("{}: truncated tensor data", e.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.insert(e.name.clone(), Tensor::new(&e.shape, data).map_err(|e| bad(e.to_string()))?);
            pos += 4 * n;
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        let bundle = Self {
            kind: meta.kind,
            config: meta.config,
            tensors,
            parent_checksum: meta.parent_checksum,
            extra: meta.extra,
        };
        if bundle.checksum() != meta.checksum {
            return Err(bad("tensor checksum mismatch".into()));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
