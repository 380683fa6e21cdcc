//! On-disk container shared by checkpoints, activation dumps, and fit files:
//! `manifest.json` describing named f32 arrays plus a single `data.bin` of
//! little-endian row-major floats. Round-trips are byte-exact.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub arrays: Vec<ArrayEntry>,
    /// Container-specific payload (model config, prompts, fit metadata),
    /// stored as extra top-level manifest fields. Must be a JSON object.
    #[serde(flatten)]
    pub meta: serde_json::Value,
}

/// Write arrays (in the given order) plus metadata under `dir`.
pub fn write_container(dir: &Path, meta: serde_json::Value, arrays: &[(String, &Tensor)]) -> Result<()> {
    if !meta.is_object() {
        return Err(Error::invalid("container meta must be a JSON object"));
    }
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(arrays.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor) in arrays {
        let byte_offset = blob.len() as u64;
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ArrayEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset,
            byte_len: (tensor.numel() * 4) as u64,
        });
    }
    let manifest = Manifest { version: CONTAINER_VERSION, meta, arrays: entries };
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::File::create(dir.join("manifest.json"))?.write_all(&json)?;
    std::fs::File::create(dir.join("data.bin"))?.write_all(&blob)?;
    Ok(())
}

/// Read a container back. Arrays come out in manifest order.
pub fn read_container(dir: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::DumpFormat(format!("no manifest.json in {}", dir.display())));
    }
    let manifest: Manifest = serde_json::from_reader(std::fs::File::open(&manifest_path)?)?;
    if manifest.version != CONTAINER_VERSION {
        return Err(Error::DumpVersion { found: manifest.version, supported: CONTAINER_VERSION });
    }
    let mut blob = Vec::new();
    std::fs::File::open(dir.join("data.bin"))?.read_to_end(&mut blob)?;
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    let mut seen = BTreeMap::new();
    for entry in &manifest.arrays {
        if entry.dtype != "f32" {
            return Err(Error::DumpFormat(format!("array {}: unsupported dtype {}", entry.name, entry.dtype)));
        }
        if seen.insert(entry.name.clone(), ()).is_some() {
            return Err(Error::DumpFormat(format!("duplicate array name {}", entry.name)));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.byte_len != (numel * 4) as u64 {
            return Err(Error::DumpFormat(format!(
                "array {}: shape {:?} implies {} bytes, manifest says {}",
                entry.name,
                entry.shape,
                numel * 4,
                entry.byte_len
            )));
        }
        let start = entry.byte_offset as usize;
        let end = start + entry.byte_len as usize;
        if end > blob.len() {
            return Err(Error::DumpFormat(format!(
                "array {}: blob truncated ({} bytes, need {})",
                entry.name,
                blob.len(),
                end
            )));
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::DumpFormat(format!("array {} contains non-finite values", entry.name)));
        }
        arrays.push((entry.name.clone(), Tensor::from_raw(entry.shape.clone(), data)));
    }
    let total: u64 = manifest.arrays.iter().map(|e| e.byte_len).sum();
    if total != blob.len() as u64 {
        return Err(Error::DumpFormat(format!(
            "data.bin has {} bytes, manifest accounts for {total}",
            blob.len()
        )));
    }
    Ok((manifest.meta, arrays))
}
