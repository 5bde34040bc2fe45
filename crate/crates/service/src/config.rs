//! Service configuration from an optional TOML file plus environment
//! overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    pub data_dir: PathBuf,
    pub bank_id: String,
    pub bank_path: PathBuf,
    pub structure_path: PathBuf,
    /// Trained embedding model; free-text answers need it and an endpoint.
    pub model_path: Option<PathBuf>,
    pub embedding_url: Option<String>,
    pub embedding_timeout_ms: u64,
    /// Rewrite a journal as one snapshot after this many appended turns.
    pub compact_every: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            data_dir: PathBuf::from("data/sessions"),
            bank_id: "default".into(),
            bank_path: PathBuf::from("artifacts/bank.json"),
            structure_path: PathBuf::from("artifacts/structure.json"),
            model_path: None,
            embedding_url: None,
            embedding_timeout_ms: 5000,
            compact_every: 16,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Toml {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid value for {name}: {value}")]
    Env { name: &'static str, value: String },
}

impl ServiceConfig {
    /// Defaults, then `path` if given, then `MCAT_*` variables from `env`.
    pub fn load<F>(path: Option<&Path>, env: F) -> Result<Self, ConfigError>
    where
        F: Fn(&str) -> Option<String>,
    {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                toml::from_str(&text).map_err(|source| ConfigError::Toml {
                    path: p.to_path_buf(),
                    source,
                })?
            }
            None => Self::default(),
        };
        if let Some(v) = env("MCAT_PORT") {
            cfg.port = v.parse().map_err(|_| ConfigError::Env {
                name: "MCAT_PORT",
                value: v,
            })?;
        }
        if let Some(v) = env("MCAT_DATA_DIR") {
            cfg.data_dir = v.into();
        }
        if let Some(v) = env("MCAT_EMBEDDING_URL") {
            cfg.embedding_url = (!v.is_empty()).then_some(v);
        }
        if let Some(v) = env("MCAT_BANK_PATH") {
            cfg.bank_path = v.into();
        }
        Ok(cfg)
    }

    pub fn from_env(path: Option<&Path>) -> Result<Self, ConfigError> {
        Self::load(path, |k| std::env::var(k).ok())
    }
}
