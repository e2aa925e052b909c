//! `manifest.json`, written into every output directory.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::CliError;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// sha256 of the effective configuration.
    pub config_hash: String,
    /// Digest of the aligned market data, when the command read any.
    pub data_digest: Option<String>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    /// Files written by the command, relative to the manifest's directory.
    pub artifacts: Vec<PathBuf>,
    pub version: String,
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, cfg: &Config) -> Self {
        let now = Utc::now();
        Self {
            command: command.into(),
            config_path: config_path.map(Path::to_path_buf),
            config_hash: cfg.hash(),
            data_digest: None,
            started_at: now,
            finished_at: now,
            artifacts: Vec::new(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.to_json(),
        }
    }

    /// Record `path` (made relative to `dir` when possible).
    pub fn add(&mut self, dir: &Path, path: &Path) {
        let rel = path.strip_prefix(dir).unwrap_or(path).to_path_buf();
        if !self.artifacts.contains(&rel) {
            self.artifacts.push(rel);
        }
    }

    pub fn write(mut self, dir: &Path) -> Result<PathBuf, CliError> {
        self.finished_at = Utc::now();
        self.artifacts.sort();
        let path = dir.join(FILE_NAME);
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(FILE_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }
}
