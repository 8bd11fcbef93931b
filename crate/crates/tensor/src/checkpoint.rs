//! Checkpoint archive: `<base>.bin` holds consecutive entries of
//! (name, dtype, shape, little-endian values); `<base>.json` indexes them.
//!
//! Entry layout in the archive:
//! `u32 name_len | name | u8 dtype_len | dtype | u32 rank | rank × u64 extent | values`

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "radformer-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset of the first value within the archive.
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub format: String,
    pub version: u32,
    pub entries: Vec<CheckpointEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Outcome of importing a checkpoint into an existing store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImportReport {
    pub loaded: Vec<String>,
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
    pub shape_mismatch: Vec<String>,
}

impl ImportReport {
    pub fn is_exact(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty() && self.shape_mismatch.is_empty()
    }
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    let s = base.as_os_str().to_string_lossy();
    let stem = s.strip_suffix(".json").or_else(|| s.strip_suffix(".bin")).unwrap_or(&s);
    (PathBuf::from(format!("{stem}.bin")), PathBuf::from(format!("{stem}.json")))
}

/// Encodes every parameter and buffer of `store`. Returns (archive, index).
pub fn encode<T: Element>(store: &ParamStore<T>, meta: serde_json::Value) -> (Vec<u8>, CheckpointIndex) {
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in store.named_tensors() {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(T::DTYPE.len() as u8);
        bytes.extend_from_slice(T::DTYPE.as_bytes());
        bytes.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let offset = bytes.len() as u64;
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        entries.push(CheckpointEntry {
            name: name.to_string(),
            dtype: T::DTYPE.to_string(),
            shape: t.shape().to_vec(),
            offset,
            nbytes: bytes.len() as u64 - offset,
        });
    }
    (bytes, CheckpointIndex { format: FORMAT.into(), version: VERSION, entries, meta })
}

/// Writes `<base>.bin` and `<base>.json`.
pub fn save<T: Element>(store: &ParamStore<T>, base: &Path, meta: serde_json::Value) -> Result<()> {
    let (bin, json) = paths(base);
    if let Some(dir) = bin.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let (bytes, index) = encode(store, meta);
    fs::write(&bin, bytes)?;
    let text = serde_json::to_string_pretty(&index).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    fs::write(&json, text + "\n")?;
    Ok(())
}

fn decode_value<T: Element>(dtype: &str, raw: &[u8]) -> Result<Vec<T>> {
    match dtype {
        "f32" => Ok(raw.chunks_exact(4).map(|c| T::from_f64_lossy(f32::read_le(c) as f64)).collect()),
        "f64" => Ok(raw.chunks_exact(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect()),
        other => Err(TensorError::Checkpoint(format!("unsupported dtype `{other}`"))),
    }
}

pub fn read_index(base: &Path) -> Result<CheckpointIndex> {
    let (_, json) = paths(base);
    let text = fs::read_to_string(&json).map_err(|e| TensorError::Io(format!("{}: {e}", json.display())))?;
    let index: CheckpointIndex =
        serde_json::from_str(&text).map_err(|e| TensorError::Checkpoint(format!("{}: {e}", json.display())))?;
    if index.format != FORMAT {
        return Err(TensorError::Checkpoint(format!("unknown format `{}`", index.format)));
    }
    Ok(index)
}

/// Reads all entries, converting to `T` if the stored dtype differs.
pub fn load<T: Element>(base: &Path) -> Result<(Vec<(String, Tensor<T>)>, CheckpointIndex)> {
    let index = read_index(base)?;
    let (bin, _) = paths(base);
    let bytes = fs::read(&bin).map_err(|e| TensorError::Io(format!("{}: {e}", bin.display())))?;
    let mut out = Vec::with_capacity(index.entries.len());
    for e in &index.entries {
        let start = e.offset as usize;
        let end = start + e.nbytes as usize;
        if end > bytes.len() {
            return Err(TensorError::Checkpoint(format!("entry `{}` runs past end of archive", e.name)));
        }
        let values = decode_value::<T>(&e.dtype, &bytes[start..end])?;
        let t = Tensor::new(e.shape.clone(), values)
            .map_err(|err| TensorError::Checkpoint(format!("entry `{}`: {err}", e.name)))?;
        out.push((e.name.clone(), t));
    }
    Ok((out, index))
}

/// Copies entries into `store` by name; shape mismatches are reported and skipped.
pub fn import<T: Element>(store: &mut ParamStore<T>, entries: Vec<(String, Tensor<T>)>) -> ImportReport {
    let mut report = ImportReport::default();
    let mut seen = std::collections::HashSet::new();
    for (name, t) in entries {
        match store.get(&name) {
            None => report.unexpected.push(name),
            Some(existing) if existing.shape() != t.shape() => report.shape_mismatch.push(name),
            Some(_) => {
                store.set(&name, t).expect("shape checked");
                seen.insert(name.clone());
                report.loaded.push(name);
            }
        }
    }
    report.missing = store
        .named_tensors()
        .map(|(n, _)| n.to_string())
        .filter(|n| !seen.contains(n))
        .collect();
    report
}
