use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, ModelError};
use crate::nn::ParamStore;

pub const CHECKPOINT_WEIGHTS: &str = "model.w32";
pub const CHECKPOINT_CONFIG: &str = "model.json";

/// Writes `model.w32` and its `model.json` config sidecar into `dir`.
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<(), ModelError> {
    fs::create_dir_all(dir).map_err(|e| ModelError::Io(dir.display().to_string(), e))?;
    let weights = dir.join(CHECKPOINT_WEIGHTS);
    fs::write(&weights, model.params().to_w32()?).map_err(|e| ModelError::Io(weights.display().to_string(), e))?;
    let config = dir.join(CHECKPOINT_CONFIG);
    let json = serde_json::to_string_pretty(model.config())?;
    fs::write(&config, json).map_err(|e| ModelError::Io(config.display().to_string(), e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Model, ModelError> {
    let config_path = dir.join(CHECKPOINT_CONFIG);
    let text = fs::read_to_string(&config_path).map_err(|e| ModelError::Io(config_path.display().to_string(), e))?;
    let config: ModelConfig = serde_json::from_str(&text)?;
    let weights_path = dir.join(CHECKPOINT_WEIGHTS);
    let bytes = fs::read(&weights_path).map_err(|e| ModelError::Io(weights_path.display().to_string(), e))?;
    let weights = ParamStore::from_w32(&bytes)?;
    Model::with_weights(config, &weights)
}
