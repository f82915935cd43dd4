//! Per-phase checkpoints: `phase_{t}.bin` holds every parameter as
//! little-endian `f32` in visiting order, `phase_{t}.json` lists names,
//! shapes and offsets together with the model configuration.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{MilError, Result};
use crate::model::{init_model, names, ModelState};
use crate::params::Parameters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub phase: usize,
    pub modality: String,
    pub config: ModelConfig,
    pub blob: String,
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
}

fn paths(dir: &Path, phase: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("phase_{phase}.bin")), dir.join(format!("phase_{phase}.json")))
}

pub fn save_checkpoint(model: &ModelState, dir: &Path, phase: usize, modality: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| MilError::io(dir, e))?;
    let (bin, json) = paths(dir, phase);
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    model.visit_params(&mut |name, shape, v| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        });
        offset += v.len();
        bytes.extend(v.iter().flat_map(|x| (*x as f32).to_le_bytes()));
    });
    fs::write(&bin, &bytes).map_err(|e| MilError::io(&bin, e))?;
    let manifest = CheckpointManifest {
        phase,
        modality: modality.to_string(),
        config: model.config.clone(),
        blob: bin.file_name().expect("file name").to_string_lossy().into_owned(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| MilError::json(&json, e))?;
    fs::write(&json, text).map_err(|e| MilError::io(&json, e))?;
    Ok(json)
}

/// Rebuild a model from a checkpoint. Values come back rounded to `f32`.
pub fn load_checkpoint(dir: &Path, phase: usize) -> Result<ModelState> {
    let (_, json) = paths(dir, phase);
    let text = fs::read_to_string(&json).map_err(|e| MilError::io(&json, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| MilError::json(&json, e))?;
    let bin = dir.join(&manifest.blob);
    let bytes = fs::read(&bin).map_err(|e| MilError::io(&bin, e))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.sha256 {
        return Err(MilError::Integrity {
            blob: bin,
            reason: "sha256 mismatch".into(),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();

    let mut model = init_model(&manifest.config)?;
    let prefix = format!("{}.", names::INPUT_PROJ);
    for t in &manifest.tensors {
        if let Some(rest) = t.name.strip_prefix(&prefix) {
            if let Some(modality) = rest.strip_suffix(".weight") {
                if t.shape.len() != 2 {
                    return Err(MilError::Structure(format!("{}: expected a matrix", t.name)));
                }
                model.ensure_input_projection(modality, t.shape[1]);
            }
        }
    }
    let table: HashMap<&str, &TensorEntry> = manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut err = None;
    let mut filled = 0;
    model.visit_params_mut(&mut |name, dst| {
        if err.is_some() {
            return;
        }
        match table.get(name) {
            Some(t) if t.shape.iter().product::<usize>() == dst.len() && t.offset + dst.len() <= values.len() => {
                dst.copy_from_slice(&values[t.offset..t.offset + dst.len()]);
                filled += 1;
            }
            Some(_) => err = Some(MilError::Structure(format!("{name}: shape or offset does not fit the model"))),
            None => err = Some(MilError::Structure(format!("{name} missing from checkpoint"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if filled != manifest.tensors.len() {
        return Err(MilError::Structure(format!(
            "checkpoint has {} tensors, model {filled}",
            manifest.tensors.len()
        )));
    }
    Ok(model)
}

pub fn load_manifest(dir: &Path, phase: usize) -> Result<CheckpointManifest> {
    let (_, json) = paths(dir, phase);
    let text = fs::read_to_string(&json).map_err(|e| MilError::io(&json, e))?;
    serde_json::from_str(&text).map_err(|e| MilError::json(&json, e))
}
