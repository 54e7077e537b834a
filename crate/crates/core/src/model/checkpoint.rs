//! Checkpoint directories: one tensor file per parameter plus `manifest.json`
//! mapping names to files and carrying the detector config.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor_file, write_tensor_file, Precision, Tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DetectorConfig,
    pub precision: Precision,
    /// Parameter name → file name relative to the checkpoint directory.
    pub tensors: BTreeMap<String, String>,
    /// Free-form entries written by the trainer (step counter, seeds).
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

fn file_name(name: &str) -> String {
    format!("{name}.sqt")
}

/// Writes every tensor in `tensors` as `<name>.sqt` under `dir`; returns the
/// name → file table.
pub fn write_tensors(dir: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, String>> {
    fs::create_dir_all(dir)?;
    let mut table = BTreeMap::new();
    for (name, t) in tensors {
        let f = file_name(name);
        write_tensor_file(&dir.join(&f), t)?;
        table.insert(name.clone(), f);
    }
    Ok(table)
}

pub fn read_tensors(dir: &Path, table: &BTreeMap<String, String>) -> Result<BTreeMap<String, Tensor>> {
    table
        .iter()
        .map(|(name, f)| {
            if Path::new(f).components().count() != 1 {
                return Err(Error::Format {
                    path: dir.join(MANIFEST),
                    reason: format!("tensor file {f:?} escapes the checkpoint directory"),
                });
            }
            Ok((name.clone(), read_tensor_file(&dir.join(f))?))
        })
        .collect()
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        reason: e.to_string(),
    })
}

/// Saves the detector's parameters and config.
pub fn save(dir: &Path, detector: &Detector, extra: serde_json::Map<String, serde_json::Value>) -> Result<()> {
    let tensors = write_tensors(dir, &detector.store.snapshot())?;
    write_manifest(
        dir,
        &Manifest {
            config: detector.config.clone(),
            precision: detector.store.precision(),
            tensors,
            extra,
        },
    )
}

/// Rebuilds a detector from a checkpoint directory.
pub fn load(dir: &Path) -> Result<(Detector, Manifest)> {
    let manifest = read_manifest(dir)?;
    let mut detector = Detector::new(manifest.config.clone(), 0, manifest.precision)?;
    let values = read_tensors(dir, &manifest.tensors)?;
    detector.store.load(&values)?;
    Ok((detector, manifest))
}
