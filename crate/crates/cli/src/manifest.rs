//! The per-run record: what went in, which configuration and seeds were
//! used, what came out.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use regverify_core::config::RunConfig;
use regverify_core::phantom::MANIFEST_FILE;
use regverify_core::{bytes_hash, config_hash};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const RUN_FILE_SUFFIX: &str = ".run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub role: String,
    pub path: String,
    /// SHA-256 of the file, or of the dataset manifest for a dataset directory.
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub seed: u64,
    pub train_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub started_at_ms: u64,
    pub duration_ms: u64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: RunConfig,
    pub config_hash: String,
    pub seeds: Seeds,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

pub fn input(role: &str, path: &Path) -> InputRecord {
    let target = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    InputRecord {
        role: role.into(),
        path: path.display().to_string(),
        sha256: fs::read(target).ok().map(|b| bytes_hash(&b)),
    }
}

/// Where the record of a run lands: `<dir>/<command>.run.json` for a
/// directory output, `<file>.run.json` next to a file output.
pub fn location(command: &str, out: &Path, out_is_dir: bool) -> PathBuf {
    if out_is_dir {
        out.join(format!("{command}{RUN_FILE_SUFFIX}"))
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(RUN_FILE_SUFFIX);
        out.with_file_name(name)
    }
}

pub struct RunRecorder {
    pub manifest: RunManifest,
    pub path: Option<PathBuf>,
}

impl RunRecorder {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            manifest: RunManifest {
                tool: env!("CARGO_PKG_NAME").into(),
                version: env!("CARGO_PKG_VERSION").into(),
                command: command.into(),
                argv: std::env::args().collect(),
                started_at_ms: now_ms(),
                duration_ms: 0,
                status: "running".into(),
                error: None,
                config: config.clone(),
                config_hash: config_hash(config),
                seeds: Seeds {
                    seed: config.seed,
                    train_seed: config.train.seed,
                },
                inputs: Vec::new(),
                outputs: Vec::new(),
            },
            path: None,
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) {
        self.manifest.inputs.push(input(role, path));
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    pub fn finish(mut self, result: &Result<(), CliError>) -> Result<(), CliError> {
        self.manifest.duration_ms = now_ms().saturating_sub(self.manifest.started_at_ms);
        match result {
            Ok(()) => self.manifest.status = "ok".into(),
            Err(e) => {
                self.manifest.status = "failed".into();
                self.manifest.error = Some(e.to_string());
            }
        }
        let Some(path) = &self.path else {
            return Ok(());
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            if !dir.exists() {
                // nothing was produced; don't create directories just for the record
                return Ok(());
            }
        }
        let bytes =
            serde_json::to_vec_pretty(&self.manifest).map_err(|e| CliError::Runtime(e.into()))?;
        fs::write(path, bytes).map_err(|e| CliError::io(path, e))
    }
}

pub fn load(path: &Path) -> Option<RunManifest> {
    serde_json::from_slice(&fs::read(path).ok()?).ok()
}
