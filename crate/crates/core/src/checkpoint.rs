//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TSLM" | version: u32 | header_len: u64 | header JSON | payload (f32 LE)
//! ```
//!
//! The header is `{"config": …, "tensors": [{"name", "shape", "offset"}]}`
//! with `offset` in bytes from the start of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tslm_tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TSLM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: Value,
    tensors: Vec<TensorEntry>,
}

/// Configuration plus named f32 tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

impl Checkpoint {
    pub fn new(config: Value) -> Self {
        Self { config, tensors: Vec::new() }
    }

    /// Appends every tensor of `store`, names prefixed with `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        self.tensors.extend(store.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())));
    }

    /// Copies the tensors named `prefix + name` into `store`. Every store
    /// entry must be present with a matching shape.
    pub fn fill_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let mut matched = 0;
        for (name, t) in &self.tensors {
            let Some(local) = name.strip_prefix(prefix) else { continue };
            let Some(id) = store.find(local) else {
                return format_err(format!("checkpoint tensor {name} is not part of the model"));
            };
            store.set(id, t.clone()).map_err(|e| Error::Format(e.to_string()))?;
            matched += 1;
        }
        if matched != store.len() {
            return format_err(format!("checkpoint provides {matched} of {} tensors under {prefix:?}", store.len()));
        }
        Ok(())
    }

    pub fn kind(&self) -> Option<&str> {
        self.config.get("kind").and_then(Value::as_str)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => format_err(format!("expected a {kind} checkpoint, found {other:?}")),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
            offset += 4 * t.len() as u64;
        }
        let header = serde_json::to_vec(&Header { config: self.config.clone(), tensors: entries })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return format_err("file too short for a checkpoint preamble");
        }
        if &bytes[..4] != MAGIC {
            return format_err("bad magic bytes");
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return format_err(format!(
                "checkpoint format version {version} is not supported (expected {FORMAT_VERSION}); no migration path from version {version}"
            ));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if header_len > body.len() {
            return format_err("truncated header");
        }
        let header: Header = serde_json::from_slice(&body[..header_len]).map_err(|e| Error::Format(format!("header: {e}")))?;
        let payload = &body[header_len..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.offset != expected {
                return format_err(format!("tensor {} at offset {} overlaps or leaves a gap (expected {expected})", e.name, e.offset));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset as usize + 4 * n;
            if end > payload.len() {
                return format_err(format!("payload truncated inside tensor {}", e.name));
            }
            let data = payload[e.offset as usize..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| Error::Format(format!("tensor {}: {err}", e.name)))?;
            tensors.push((e.name, t));
            expected = end as u64;
        }
        if expected as usize != payload.len() {
            return format_err(format!("payload holds {} bytes but the header describes {expected}", payload.len()));
        }
        Ok(Self { config: header.config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
