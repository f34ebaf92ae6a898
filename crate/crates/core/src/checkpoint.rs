//! Flat little-endian f64 parameter files with a JSON shape manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    /// Free-form integer metadata (dimensions, flags).
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn total_len(&self) -> usize {
        self.tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum()
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| Error::Config(format!("checkpoint manifest missing integer `{key}`")))
    }

    pub fn meta_bool(&self, key: &str) -> Result<bool> {
        self.meta
            .get(key)
            .and_then(|v| v.as_bool())
            .ok_or_else(|| Error::Config(format!("checkpoint manifest missing boolean `{key}`")))
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_owned();
    name.push(".json");
    path.with_file_name(name)
}

/// Write `values` to `path` and the manifest next to it.
pub fn save(path: &Path, manifest: &Manifest, values: &[f64]) -> Result<()> {
    if manifest.total_len() != values.len() {
        return Err(Error::shape(
            "checkpoint::save",
            format!(
                "manifest describes {} values, got {}",
                manifest.total_len(),
                values.len()
            ),
        ));
    }
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)?;
    let json = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    write_atomic(&manifest_path(path), &json)
}

pub fn load(path: &Path) -> Result<(Manifest, Vec<f64>)> {
    let mpath = manifest_path(path);
    let mbytes = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&mbytes).map_err(|e| Error::Parse {
        path: mpath.clone(),
        offset: e.column(),
        message: e.to_string(),
    })?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let want = manifest.total_len() * 8;
    if bytes.len() != want {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len().min(want),
            message: format!("expected {want} bytes, found {}", bytes.len()),
        });
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((manifest, values))
}
