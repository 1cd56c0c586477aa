use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use promptmad::config::Config;
use promptmad::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to rerun a command: resolved config, its hash, inputs and outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub overrides: Vec<String>,
    pub seed: u64,
    /// Canonical TOML of the resolved configuration.
    pub config: String,
    pub config_hash: String,
    pub data_root: Option<PathBuf>,
    pub corpus_fingerprint: Option<String>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn start(command: &str, cfg: &Config, overrides: &[String]) -> Self {
        let now = Utc::now();
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            overrides: overrides.to_vec(),
            seed: cfg.train.seed,
            config: cfg.to_toml(),
            config_hash: cfg.hash(),
            data_root: None,
            corpus_fingerprint: None,
            started_at: now,
            finished_at: now,
            outputs: Vec::new(),
        }
    }

    pub fn finish(mut self, out_dir: &Path) -> Result<PathBuf> {
        self.finished_at = Utc::now();
        let path = out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text).map_err(|source| Error::Io { path: path.clone(), source })?;
        Ok(path)
    }
}
