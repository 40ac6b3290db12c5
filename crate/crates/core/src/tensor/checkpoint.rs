//! Checkpoint format: a JSON manifest listing every tensor's name, shape,
//! dtype and byte offset, next to one blob of little-endian `f32` values.
//!
//! ```text
//! model.json   {"format": "tilevlm-checkpoint/1", "blob": "model.bin",
//!               "metadata": {...}, "tensors": [{"name", "shape", "dtype", "offset"}]}
//! model.bin    f32 LE, tensors back to back in manifest order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dense::{numel, Tensor};
use super::param::ParamStore;
use crate::error::{Error, Result};

pub const FORMAT: &str = "tilevlm-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub blob: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `store` as `<path>` (manifest) plus `<path>.bin` (blob).
pub fn save_checkpoint(
    store: &ParamStore<f32>,
    metadata: &BTreeMap<String, String>,
    path: &Path,
) -> Result<CheckpointManifest> {
    let blob = blob_path(path);
    let mut bytes = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for p in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            dtype: "f32".into(),
            offset: bytes.len() as u64,
        });
        for v in p.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        metadata: metadata.clone(),
        tensors,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Parse(format!(
            "unsupported checkpoint format `{}`",
            manifest.format
        )));
    }
    Ok(manifest)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, CheckpointManifest)> {
    let manifest = read_manifest(path)?;
    let blob = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Parse(format!(
                "tensor `{}` has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let start = entry.offset as usize;
        let end = start + 4 * numel(&entry.shape);
        let chunk = bytes.get(start..end).ok_or_else(|| {
            Error::Parse(format!("tensor `{}` runs past the end of the blob", entry.name))
        })?;
        let data = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.insert(&entry.name, Tensor::new(entry.shape.clone(), data)?)?;
    }
    Ok((store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(any::<f32>(), 1..40),
            split in 0usize..40,
        ) {
            let split = split.min(values.len());
            let mut store = ParamStore::new();
            store.insert("a.x", Tensor::new(vec![split], values[..split].to_vec()).unwrap()).unwrap();
            store.insert("b.y", Tensor::new(vec![values.len() - split, 1], values[split..].to_vec()).unwrap()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("ck.json");
            let mut meta = BTreeMap::new();
            meta.insert("stage".to_string(), "pretrained".to_string());
            save_checkpoint(&store, &meta, &path).unwrap();
            let (loaded, manifest) = load_checkpoint(&path).unwrap();
            prop_assert_eq!(manifest.metadata, meta);
            for p in store.iter() {
                let q = loaded.get(&p.name).unwrap();
                prop_assert_eq!(p.tensor.shape(), q.tensor.shape());
                for (a, b) in p.tensor.data().iter().zip(q.tensor.data()) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn truncated_blob_is_a_parse_error() {
        let mut store = ParamStore::new();
        store.insert_const("w", &[4], 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&store, &BTreeMap::new(), &path).unwrap();
        fs::write(path.with_extension("bin"), [0u8; 6]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Parse(_))));
    }
}
