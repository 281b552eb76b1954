//! Run manifests: a machine-readable record of what a command produced.
//!
//! Every command writes a `run_manifest.json` into its output directory
//! listing the command line identity, the seed, the configuration hashes it
//! ran under, per-stage wall-clock timings, and a checksum inventory of
//! every file it wrote. Timings are the only part that varies between
//! reruns; the inventoried files themselves are byte-identical given the
//! same inputs, configuration, and seed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};
use specwave::config::{config_hash, ModelConfig};
use specwave::error::{Error, Result};

/// One output file, identified by its content hash.
#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    /// Path relative to the output directory.
    pub file: String,
    /// Hex SHA-256 of the file contents.
    pub sha256: String,
    /// File size in bytes.
    pub bytes: u64,
}

/// Wall-clock duration of one named stage.
#[derive(Debug, Clone, Serialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

/// A configuration entering the run, by label and content hash.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigRef {
    pub label: String,
    pub sha256: String,
}

/// The serialized form of a run record.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub configs: Vec<ConfigRef>,
    pub timings: Vec<StageTime>,
    pub files: Vec<FileEntry>,
}

/// Accumulates the manifest while a command runs.
pub struct RunRecorder {
    out_dir: PathBuf,
    command: String,
    seed: u64,
    configs: Vec<ConfigRef>,
    timings: Vec<StageTime>,
    files: Vec<FileEntry>,
}

impl RunRecorder {
    /// Start recording a command writing into `out_dir` (created if absent).
    pub fn new(command: &str, seed: u64, out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir)
            .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
        Ok(RunRecorder {
            out_dir: out_dir.to_path_buf(),
            command: command.to_string(),
            seed,
            configs: Vec::new(),
            timings: Vec::new(),
            files: Vec::new(),
        })
    }

    /// The output directory this run writes into.
    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    /// Record a configuration entering the run.
    pub fn config(&mut self, label: &str, cfg: &ModelConfig) {
        self.configs.push(ConfigRef {
            label: label.to_string(),
            sha256: config_hash(cfg),
        });
    }

    /// Run `work` as a named stage, recording its wall-clock time.
    pub fn stage<T>(&mut self, name: &str, work: impl FnOnce() -> Result<T>) -> Result<T> {
        let started = Instant::now();
        let value = work()?;
        self.timings.push(StageTime {
            stage: name.to_string(),
            seconds: started.elapsed().as_secs_f64(),
        });
        Ok(value)
    }

    /// Write `contents` to `name` under the output directory and inventory it.
    pub fn write_file(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.out_dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        std::fs::write(&path, contents).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.files.push(FileEntry {
            file: name.to_string(),
            sha256: sha256_hex(contents.as_bytes()),
            bytes: contents.len() as u64,
        });
        Ok(())
    }

    /// Inventory a file some other component already wrote under the output
    /// directory, given relative to it.
    pub fn track_file(&mut self, name: &str) -> Result<()> {
        let path = self.out_dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.files.push(FileEntry {
            file: name.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Write `run_manifest.json` and finish the run.
    pub fn finish(mut self) -> Result<()> {
        self.files.sort_by(|a, b| a.file.cmp(&b.file));
        let manifest = RunManifest {
            command: self.command,
            version: format!("specwave {}", env!("CARGO_PKG_VERSION")),
            seed: self.seed,
            configs: self.configs,
            timings: self.timings,
            files: self.files,
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Numeric(format!("manifest serialization failed: {e}")))?;
        let path = self.out_dir.join("run_manifest.json");
        std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
