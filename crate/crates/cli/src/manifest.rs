//! Run manifests: what was run, with which configuration, and what it wrote.

use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rrmo::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

/// Hex SHA-256 of the bytes a run was configured from.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    /// The effective configuration after command-line overrides.
    pub config: serde_json::Value,
    pub seed: u64,
    pub tool_version: &'static str,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config_bytes: &[u8], config: serde_json::Value, seed: u64) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self {
            command: command.into(),
            config_digest: digest(config_bytes),
            config,
            seed,
            tool_version: env!("CARGO_PKG_VERSION"),
            started_unix,
            wall_clock_seconds: 0.0,
            outputs: Vec::new(),
        }
    }

    /// Records the elapsed time and writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path, elapsed: Duration) -> Result<PathBuf> {
        self.wall_clock_seconds = elapsed.as_secs_f64();
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&self).map_err(Error::from)?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}
