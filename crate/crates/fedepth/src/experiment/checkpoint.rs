//! Model state persistence: one JSON file per network per completed
//! unit (round or epoch), plus a small manifest written last so a partly
//! written checkpoint is never mistaken for a complete one.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::GlobalModel;
use crate::models::{parameter_bytes, NetworkWidths, ParameterSet};
use crate::real::Real;

/// Completeness marker and identity card of one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config_hash: String,
    pub widths: NetworkWidths,
    /// Round index for federated runs, epoch index for the baseline.
    pub unit: u64,
    /// Aggregation count carried by the model at this point.
    pub version: u64,
    pub model_bytes: u64,
}

fn depth_file(dir: &Path, unit: u64) -> PathBuf {
    dir.join(format!("state-{unit:06}-depth.json"))
}

fn pose_file(dir: &Path, unit: u64) -> PathBuf {
    dir.join(format!("state-{unit:06}-pose.json"))
}

fn manifest_file(dir: &Path, unit: u64) -> PathBuf {
    dir.join(format!("state-{unit:06}-manifest.json"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value)
        .map_err(|e| Error::Checkpoint(format!("state does not serialize: {e}")))?;
    fs::write(path, text)
        .map_err(|e| Error::Checkpoint(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Persists the model after `unit` completed. The parameter files land
/// first and the manifest last, so the manifest's presence certifies the
/// whole checkpoint.
pub fn save_checkpoint<F: Real>(
    dir: &Path,
    config_hash: &str,
    widths: NetworkWidths,
    model: &GlobalModel<F>,
    unit: u64,
) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Checkpoint(format!("cannot create {}: {e}", dir.display())))?;
    write_json(&depth_file(dir, unit), &model.depth)?;
    write_json(&pose_file(dir, unit), &model.pose)?;
    let manifest = CheckpointManifest {
        config_hash: config_hash.to_string(),
        widths,
        unit,
        version: model.version,
        model_bytes: model.transfer_bytes(),
    };
    write_json(&manifest_file(dir, unit), &manifest)
}

/// Loads the checkpoint for `unit`, verifying it belongs to the given
/// experiment and that the stored parameters have the promised size.
pub fn load_checkpoint<F: Real>(
    dir: &Path,
    config_hash: &str,
    unit: u64,
) -> Result<(CheckpointManifest, GlobalModel<F>)> {
    let manifest: CheckpointManifest = read_json(&manifest_file(dir, unit))?;
    if manifest.config_hash != config_hash {
        return Err(Error::Checkpoint(format!(
            "checkpoint {} belongs to experiment {}, not {}",
            unit, manifest.config_hash, config_hash
        )));
    }
    if manifest.unit != unit {
        return Err(Error::Checkpoint(format!(
            "manifest for unit {unit} claims unit {}",
            manifest.unit
        )));
    }
    let depth: ParameterSet<F> = read_json(&depth_file(dir, unit))?;
    let pose: ParameterSet<F> = read_json(&pose_file(dir, unit))?;
    let stored = parameter_bytes(&[&depth, &pose]);
    if stored != manifest.model_bytes {
        return Err(Error::Checkpoint(format!(
            "checkpoint {unit} holds {stored} parameter bytes, manifest says {}",
            manifest.model_bytes
        )));
    }
    let model = GlobalModel {
        depth,
        pose,
        version: manifest.version,
    };
    Ok((manifest, model))
}
