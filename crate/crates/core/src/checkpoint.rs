//! Checkpoint file format.
//!
//! Layout: one line of JSON (no interior newlines) terminated by `\n`,
//! followed by the raw little-endian tensor payload. The header records a
//! format version, free-form metadata, and one entry per tensor:
//! `{name, shape, dtype (f32|f64), byte_offset, byte_length}` with offsets
//! relative to the start of the payload. f64 round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    /// Model kind and hyperparameters needed to rebuild the architecture.
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint: metadata plus named tensors with trainability flags.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, serde_json::Value>,
    tensors: BTreeMap<String, (Tensor, bool)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta_str(&mut self, key: &str, value: &str) {
        self.meta.insert(key.into(), serde_json::Value::String(value.into()));
    }

    pub fn set_meta_u64(&mut self, key: &str, value: u64) {
        self.meta.insert(key.into(), serde_json::Value::from(value));
    }

    pub fn set_meta_f64(&mut self, key: &str, value: f64) {
        self.meta.insert(key.into(), serde_json::Value::from(value));
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing meta field '{key}'")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint(format!("missing meta field '{key}'")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Checkpoint(format!("missing meta field '{key}'")))
    }

    /// Add every tensor of a parameter store under `prefix.`.
    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, p) in store.iter() {
            self.tensors.insert(format!("{prefix}.{name}"), (p.value.clone(), p.trainable));
        }
    }

    /// Collect the tensors under `prefix.` back into a parameter store.
    pub fn extract_store(&self, prefix: &str) -> Result<ParamStore> {
        let want = format!("{prefix}.");
        let mut ps = ParamStore::new();
        for (name, (t, trainable)) in &self.tensors {
            if let Some(stripped) = name.strip_prefix(&want) {
                ps.insert(stripped, t.clone(), *trainable);
            }
        }
        if ps.is_empty() {
            return Err(Error::Checkpoint(format!("no tensors under prefix '{prefix}.'")));
        }
        Ok(ps)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let want = format!("{prefix}.");
        self.tensors.keys().any(|n| n.starts_with(&want))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let elem = match dtype {
            Dtype::F32 => 4u64,
            Dtype::F64 => 8u64,
        };
        let mut offset = 0u64;
        for (name, (t, _)) in &self.tensors {
            let len = t.len() as u64 * elem;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                dtype,
                byte_offset: offset,
                byte_length: len,
            });
            offset += len;
        }
        let mut meta = self.meta.clone();
        let trainable: Vec<&String> =
            self.tensors.iter().filter(|(_, (_, tr))| *tr).map(|(n, _)| n).collect();
        meta.insert("trainable".into(), serde_json::to_value(trainable).expect("serializable"));
        let header = Header { version: 1, meta, tensors: entries };

        let mut out = BufWriter::new(File::create(path)?);
        let header_json = serde_json::to_string(&header)
            .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;
        out.write_all(header_json.as_bytes())?;
        out.write_all(b"\n")?;
        for (_, (t, _)) in &self.tensors {
            match dtype {
                Dtype::F64 => {
                    for v in &t.data {
                        out.write_all(&v.to_le_bytes())?;
                    }
                }
                Dtype::F32 => {
                    for v in &t.data {
                        out.write_all(&(*v as f32).to_le_bytes())?;
                    }
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut raw = Vec::new();
        reader.read_to_end(&mut raw)?;
        let newline = raw
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("no header terminator".into()))?;
        let header: Header = serde_json::from_slice(&raw[..newline])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.version != 1 {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
        }
        let payload = &raw[newline + 1..];
        let trainable: Vec<String> = header
            .meta
            .get("trainable")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .unwrap_or_default();

        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let count: usize = e.shape.iter().product();
            let (start, end) = (e.byte_offset as usize, (e.byte_offset + e.byte_length) as usize);
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor '{}' extends past payload", e.name)));
            }
            let bytes = &payload[start..end];
            let data: Vec<f64> = match e.dtype {
                Dtype::F64 => {
                    if bytes.len() != count * 8 {
                        return Err(Error::Checkpoint(format!("tensor '{}' length mismatch", e.name)));
                    }
                    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
                }
                Dtype::F32 => {
                    if bytes.len() != count * 4 {
                        return Err(Error::Checkpoint(format!("tensor '{}' length mismatch", e.name)));
                    }
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                        .collect()
                }
            };
            tensors.insert(e.name.clone(), (Tensor::new(e.shape.clone(), data), trainable.contains(&e.name)));
        }
        let mut meta = header.meta;
        meta.remove("trainable");
        Ok(Self { meta, tensors })
    }
}
