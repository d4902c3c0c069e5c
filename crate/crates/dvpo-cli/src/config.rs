//! Config loading, overrides, and the canonical content hash.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use dvpo_core::trainer::TrainConfig;

use crate::CliError;

/// Load a TOML config, or the built-in defaults when no path is given.
/// Parse and validation failures are config errors.
pub fn load_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    let cfg = match path {
        None => TrainConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
    };
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

/// Hash of the config contents, independent of how the source file ordered
/// its keys: the config is re-serialized to JSON with sorted object keys
/// and the digest taken over that canonical form.
pub fn config_hash(cfg: &TrainConfig) -> Result<String, CliError> {
    let value = serde_json::to_value(cfg)
        .map_err(|e| CliError::Other(format!("config serialization: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(value.to_string().as_bytes());
    Ok(format!("sha256:{:x}", hasher.finalize()))
}

/// Return a copy of the config with the value at a dotted field path
/// replaced. The raw value is interpreted as JSON when possible (numbers,
/// booleans) and as a bare string otherwise, then the whole config is
/// re-deserialized so type and range errors surface as config errors.
pub fn set_param(cfg: &TrainConfig, path: &str, raw: &str) -> Result<TrainConfig, CliError> {
    let mut root = serde_json::to_value(cfg)
        .map_err(|e| CliError::Other(format!("config serialization: {e}")))?;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::Config(format!("bad parameter path '{path}'")));
    }
    let mut cursor = &mut root;
    for seg in &segments[..segments.len() - 1] {
        cursor = cursor
            .as_object_mut()
            .ok_or_else(|| {
                CliError::Config(format!("parameter path '{path}' does not name a field"))
            })?
            .get_mut(*seg)
            .ok_or_else(|| CliError::Config(format!("unknown parameter path '{path}'")))?;
    }
    let obj = cursor.as_object_mut().ok_or_else(|| {
        CliError::Config(format!("parameter path '{path}' does not name a field"))
    })?;
    let last = *segments.last().unwrap();
    if !obj.contains_key(last) {
        return Err(CliError::Config(format!("unknown parameter path '{path}'")));
    }
    let parsed = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    obj.insert(last.to_string(), parsed);
    let updated: TrainConfig = serde_json::from_value(root)
        .map_err(|e| CliError::Config(format!("cannot set {path}={raw}: {e}")))?;
    updated
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(updated)
}
