//! Plain-text `key = value` configuration files.
//!
//! One setting per line, `#` starts a comment. Unknown keys are errors so a
//! typo cannot silently fall back to a default.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("duplicate key `{0}`")]
    Duplicate(String),
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("key `{key}`: cannot parse `{value}` as {ty}")]
    BadValue {
        key: String,
        value: String,
        ty: &'static str,
    },
    #[error("unknown keys: {0}")]
    UnknownKeys(String),
    #[error("{0}")]
    Invalid(String),
}

/// Parsed settings; typed getters consume entries and [`KvConfig::finish`]
/// rejects whatever was never asked for.
#[derive(Debug, Default)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: i + 1,
                text: raw.trim().to_string(),
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Malformed {
                    line: i + 1,
                    text: raw.trim().to_string(),
                });
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate(key));
            }
        }
        Ok(KvConfig { values })
    }

    pub fn from_pairs(pairs: &[(&str, &str)]) -> Self {
        KvConfig {
            values: pairs
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    fn take<T: FromStr>(&mut self, key: &str, ty: &'static str) -> Result<Option<T>, ConfigError> {
        match self.values.remove(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v,
                ty,
            }),
        }
    }

    /// Value for `key`, or `default` when absent.
    pub fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError> {
        let ty = std::any::type_name::<T>();
        Ok(self.take(key, ty)?.unwrap_or(default))
    }

    /// Value for `key`; absence is an error.
    pub fn required<T: FromStr>(&mut self, key: &str) -> Result<T, ConfigError> {
        let ty = std::any::type_name::<T>();
        self.take(key, ty)?
            .ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    /// Errors if any key was never consumed.
    pub fn finish(self) -> Result<(), ConfigError> {
        if self.values.is_empty() {
            Ok(())
        } else {
            let keys: Vec<String> = self.values.into_keys().collect();
            Err(ConfigError::UnknownKeys(keys.join(", ")))
        }
    }
}
