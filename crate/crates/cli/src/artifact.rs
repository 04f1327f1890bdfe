//! Versioned JSON checkpoints and the hashes that chain them together.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Envelope around every persisted stage output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub format_version: u32,
    pub kind: String,
    /// Hash of the configuration that produced this artifact, chained through
    /// the hashes of its inputs.
    pub config_hash: String,
    pub payload: T,
}

/// SHA-256 of the canonical JSON form of `value` (object keys sorted).
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value).expect("config types always serialize");
    hex::encode(Sha256::digest(serde_json::to_vec(&canonical).expect("a JSON value always serializes")))
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CliError::MissingArtifact { path: path.to_path_buf() })
        }
        Err(e) => return Err(CliError::io(path, e)),
    };
    serde_json::from_str(&text).map_err(|e| CliError::json(path, e))
}

pub fn save<T: Serialize>(path: &Path, kind: &str, config_hash: String, payload: T) -> Result<()> {
    let ck = Checkpoint { format_version: FORMAT_VERSION, kind: kind.to_string(), config_hash, payload };
    write_json(path, &ck)
}

/// Loads a checkpoint and refuses it unless it was produced by `expected_hash`.
pub fn load<T: DeserializeOwned>(path: &Path, kind: &str, expected_hash: &str) -> Result<T> {
    let ck: Checkpoint<serde_json::Value> = read_json(path)?;
    if ck.format_version != FORMAT_VERSION {
        return Err(CliError::stale(path, format!("format version {} (expected {FORMAT_VERSION})", ck.format_version)));
    }
    if ck.kind != kind {
        return Err(CliError::stale(path, format!("holds a {} checkpoint, expected {kind}", ck.kind)));
    }
    if ck.config_hash != expected_hash {
        return Err(CliError::stale(
            path,
            format!("config hash {} does not match the current config ({expected_hash}); rerun this stage", ck.config_hash),
        ));
    }
    serde_json::from_value(ck.payload).map_err(|e| CliError::json(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"a": 1, "b": [1, 2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"b": [1, 2], "a": 1}"#).unwrap();
        assert_eq!(hash_json(&a), hash_json(&b));
        assert_ne!(hash_json(&a), hash_json(&json!({"a": 2, "b": [1, 2]})));
    }

    #[test]
    fn load_checks_existence_kind_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        assert!(matches!(load::<u32>(&path, "x", "h"), Err(CliError::MissingArtifact { .. })));
        save(&path, "x", "h".into(), 7u32).unwrap();
        assert_eq!(load::<u32>(&path, "x", "h").unwrap(), 7);
        assert!(matches!(load::<u32>(&path, "x", "other"), Err(CliError::StaleArtifact { .. })));
        assert!(matches!(load::<u32>(&path, "y", "h"), Err(CliError::StaleArtifact { .. })));
    }
}
