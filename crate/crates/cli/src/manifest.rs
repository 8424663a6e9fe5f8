//! Run manifests: what a command read, what it wrote, and how to redo it.

use enzymeflow::config::RunConfig;
use enzymeflow::io_util::{file_digest, write_atomic};
use enzymeflow::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    /// Arguments after the program name.
    pub command: Vec<String>,
    pub cwd: String,
    pub config_hash: String,
    pub config: String,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = enzymeflow::io_util::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

/// Collects the digests of everything a command touches.
pub struct Run {
    pub cfg: RunConfig,
    pub seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    started: Instant,
    started_unix: u64,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Self {
        Run {
            cfg,
            seed: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = file_digest(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Writes atomically, creating parent directories.
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        write_atomic(path, bytes)?;
        self.record_output(path)
    }

    /// Registers a file some library routine already wrote.
    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        let digest = file_digest(path)?;
        self.outputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn outputs(&self) -> Vec<FileDigest> {
        digests(&self.outputs)
    }

    pub fn finish(&self, command: &[String]) -> RunManifest {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_vec(),
            cwd: std::env::current_dir()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            config_hash: self.cfg.hash(),
            config: self.cfg.to_text(),
            seed: self.seed,
            inputs: digests(&self.inputs),
            outputs: digests(&self.outputs),
            started_unix: self.started_unix,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        }
    }
}

fn digests(map: &BTreeMap<String, String>) -> Vec<FileDigest> {
    map.iter()
        .map(|(p, d)| FileDigest {
            path: p.clone(),
            sha256: d.clone(),
        })
        .collect()
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_atomic(path, text.as_bytes())
}

/// `<file>.manifest.json` beside a file output.
pub fn beside(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}
