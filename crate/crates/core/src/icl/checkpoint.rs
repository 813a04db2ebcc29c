//! A checkpoint directory holds `weights.bin` (tensor bundle, parameters in
//! layout order) and `manifest.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{load_bundle, save_bundle};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model: ModelConfig,
    pub max_len: usize,
    pub step: usize,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, model: &Model, step: usize) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    save_bundle(dir.join(WEIGHTS_FILE), model.params())?;
    let manifest = Manifest {
        model: model.config().clone(),
        max_len: model.max_len(),
        step,
        params: model
            .info()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

/// Loads a checkpoint, returning the model and the step it was saved at.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, usize)> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = crate::config::from_json_str(&text)?;
    let params = load_bundle(dir.join(WEIGHTS_FILE))?;
    let model = Model::from_params(&manifest.model, manifest.max_len, params)?;
    for (info, entry) in model.info().iter().zip(&manifest.params) {
        if info.name != entry.name || info.shape != entry.shape {
            return Err(Error::Format(format!(
                "manifest entry {} does not match parameter {}",
                entry.name, info.name
            )));
        }
    }
    if model.info().len() != manifest.params.len() {
        return Err(Error::Format("manifest lists the wrong number of parameters".into()));
    }
    Ok((model, manifest.step))
}
