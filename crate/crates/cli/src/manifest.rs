//! Run manifests: resolved configuration, input hashes, and produced files,
//! written atomically when a command finishes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Resolved configuration as flat key/value pairs.
    pub config: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: String,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            config: BTreeMap::new(),
            started_at: now(),
            finished_at: String::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    /// Record a serializable config block as flattened key/value pairs.
    pub fn set_struct(&mut self, prefix: &str, value: &impl Serialize) {
        if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(value) {
            for (k, v) in map {
                let rendered = match v {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                self.config.insert(format!("{prefix}.{k}"), rendered);
            }
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path)?;
        let mut h = Sha256::new();
        h.update(&bytes);
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256: hex::encode(h.finalize()),
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Finalize and write via a temp file + rename so the manifest is never
    /// observed half-written.
    pub fn write(mut self, path: &Path) -> Result<(), CliError> {
        self.finished_at = now();
        let json = serde_json::to_string_pretty(&self)
            .map_err(|e| CliError::Io(format!("manifest serialize: {e}")))?;
        let tmp: PathBuf = path.with_extension("json.tmp");
        std::fs::write(&tmp, json)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}
