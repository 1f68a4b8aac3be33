//! Machine-readable record of one command invocation.

use std::path::{Path, PathBuf};

use nmt_core::{Error, Result};
use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector, enough to re-run the command.
    pub args: Vec<String>,
    pub version: String,
    pub seed: Option<u64>,
    pub config_digest: Option<String>,
    /// Resolved run configuration, when the command used one.
    pub config: Option<RunConfig>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub summary: Value,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            args: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: None,
            config_digest: None,
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: Value::Null,
        }
    }

    pub fn with_config(mut self, cfg: &RunConfig) -> Self {
        self.seed = Some(cfg.seed);
        self.config_digest = Some(cfg.digest());
        self.config = Some(cfg.clone());
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}
