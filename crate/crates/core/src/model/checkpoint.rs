//! Checkpoint directory: one tensor file per parameter (`<name>.mntd` for
//! 64-bit models, `<name>.mntt` otherwise) and a `key=value` config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::numerics::{load_tensor, save_tensor, Precision, Scalar};

use super::{MintimeModel, ModelConfig, ModelError};

pub const CONFIG_FILE: &str = "config.txt";

fn io_err(path: &Path, e: impl std::fmt::Display) -> ModelError {
    ModelError::Config(format!("{}: {e}", path.display()))
}

/// Writes the model; `extra` pairs (training and assembly settings) are
/// stored after the model keys under their own names.
pub fn save_checkpoint<F: Scalar>(
    dir: &Path,
    model: &MintimeModel<F>,
    extra: &[(String, String)],
) -> Result<(), ModelError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let (precision, ext) = if std::mem::size_of::<F>() == 8 {
        (Precision::F64, "mntd")
    } else {
        (Precision::F32, "mntt")
    };
    let mut text = String::new();
    for (k, v) in model.config.pairs() {
        text.push_str(&format!("model.{k}={v}\n"));
    }
    for (k, v) in extra {
        text.push_str(&format!("{k}={v}\n"));
    }
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, text).map_err(|e| io_err(&cfg_path, e))?;
    for (name, t) in model.params() {
        save_tensor(&dir.join(format!("{name}.{ext}")), t, precision)?;
    }
    Ok(())
}

pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, ModelError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| io_err(path, format!("line {}: expected key=value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Loads a checkpoint; returns the model and the non-model config pairs.
pub fn load_checkpoint<F: Scalar>(dir: &Path) -> Result<(MintimeModel<F>, BTreeMap<String, String>), ModelError> {
    let pairs = read_config_file(&dir.join(CONFIG_FILE))?;
    let mut config = ModelConfig::default();
    let mut extra = BTreeMap::new();
    for (k, v) in pairs {
        match k.strip_prefix("model.") {
            Some(key) => {
                if !config.set(key, &v).map_err(ModelError::Config)? {
                    return Err(ModelError::Config(format!("unknown model key {key}")));
                }
            }
            None => {
                extra.insert(k, v);
            }
        }
    }
    let mut params = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let (Some(stem), Some(ext)) = (path.file_stem(), path.extension()) else { continue };
        if ext == "mntd" || ext == "mntt" {
            params.insert(stem.to_string_lossy().into_owned(), load_tensor::<F>(&path)?);
        }
    }
    Ok((MintimeModel::from_params(config, params)?, extra))
}
