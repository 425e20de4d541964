//! Run directories and their manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// `None` when the built-in default config was used.
    pub config_path: Option<PathBuf>,
    /// SHA-256 of the exact config bytes, also stored as `config.json`.
    pub config_sha256: String,
    pub seed: u64,
    pub started: String,
    pub finished: Option<String>,
    pub status: String,
    pub metrics: serde_json::Value,
    pub checkpoints: Vec<PathBuf>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// An output directory holding one manifest.
pub struct RunDir {
    pub path: PathBuf,
    pub manifest: RunManifest,
}

impl RunDir {
    /// Claims `path`. An existing directory that already holds a manifest is
    /// refused unless `force`, in which case its files are overwritten.
    pub fn create(path: &Path, force: bool, command: &str, config_path: Option<&Path>, config_bytes: &[u8], seed: u64) -> Result<Self> {
        if path.join(MANIFEST).exists() && !force {
            bail!("{} already holds a run; pass --force to overwrite it", path.display());
        }
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        fs::write(path.join("config.json"), config_bytes)?;
        let run = Self {
            path: path.to_path_buf(),
            manifest: RunManifest {
                command: command.into(),
                args: std::env::args().collect(),
                config_path: config_path.map(Path::to_path_buf),
                config_sha256: sha256_hex(config_bytes),
                seed,
                started: now(),
                finished: None,
                status: "running".into(),
                metrics: serde_json::Value::Null,
                checkpoints: Vec::new(),
            },
        };
        run.save()?;
        Ok(run)
    }

    pub fn save(&self) -> Result<()> {
        fs::write(self.path.join(MANIFEST), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn finish(&mut self, status: &str, metrics: serde_json::Value) -> Result<()> {
        self.manifest.finished = Some(now());
        self.manifest.status = status.into();
        self.manifest.metrics = metrics;
        self.save()
    }
}
