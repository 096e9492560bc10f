use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Everything needed to rerun an artifact-producing command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub command: String,
    pub command_line: Vec<String>,
    pub config: Value,
    pub dataset: Option<String>,
    pub dataset_sha256: Option<String>,
    pub checkpoint: Option<String>,
    pub checkpoint_sha256: Option<String>,
    pub seeds: Vec<u64>,
    pub outputs: Vec<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, config: Value, started_unix: f64) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            command_line: std::env::args().collect(),
            config,
            dataset: None,
            dataset_sha256: None,
            checkpoint: None,
            checkpoint_sha256: None,
            seeds: Vec::new(),
            outputs: Vec::new(),
            started_unix,
            finished_unix: started_unix,
        }
    }

    pub fn dataset(mut self, path: &Path) -> Result<Self> {
        self.dataset_sha256 = Some(sha256_file(path)?);
        self.dataset = Some(path.display().to_string());
        Ok(self)
    }

    pub fn checkpoint(mut self, path: &Path) -> Result<Self> {
        self.checkpoint_sha256 = Some(sha256_file(path)?);
        self.checkpoint = Some(path.display().to_string());
        Ok(self)
    }

    pub fn seeds(mut self, seeds: &[u64]) -> Self {
        self.seeds = seeds.to_vec();
        self
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    /// Stamps the finish time and writes the manifest as pretty JSON.
    pub fn write(mut self, path: &Path) -> Result<PathBuf> {
        self.finished_unix = now();
        let text = serde_json::to_string_pretty(&self)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path.to_path_buf())
    }
}

/// `<artifact>.manifest.json` next to a single-file artifact.
pub fn beside(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}
