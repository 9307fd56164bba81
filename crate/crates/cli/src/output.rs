use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    label: &'a str,
    seed: u64,
    fingerprint: &'a str,
    config: &'a ExperimentConfig,
    outputs: &'a [OutputEntry],
    /// Written but left out of the hashes (wall-clock timings).
    untracked: &'a [String],
}

/// One run directory. Every hashed file is listed in `manifest.json`, which
/// is written last.
pub struct RunDir {
    root: PathBuf,
    fingerprint: String,
    outputs: Vec<OutputEntry>,
    untracked: Vec<String>,
}

fn write_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Internal(format!("cannot write {}: {e}", path.display()))
}

impl RunDir {
    pub fn create(root: &Path, fingerprint: &str) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| write_err(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            fingerprint: fingerprint.to_string(),
            outputs: Vec::new(),
            untracked: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn put(&self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| write_err(dir, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| write_err(&path, e))
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        self.put(rel, bytes)?;
        self.outputs.push(OutputEntry {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
        Ok(())
    }

    /// CSV body behind a `#` line carrying the fingerprint and seed.
    pub fn write_csv(&mut self, rel: &str, seed: u64, body: &str) -> Result<(), CliError> {
        let text = format!("# ctdg fingerprint={} seed={seed}\n{body}", self.fingerprint);
        self.write(rel, text.as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    pub fn write_untracked(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        self.put(rel, bytes)?;
        self.untracked.push(rel.to_string());
        Ok(())
    }

    pub fn finish(self, command: &str, seed: u64, config: &ExperimentConfig) -> Result<Vec<OutputEntry>, CliError> {
        let m = Manifest {
            tool: "ctdg",
            version: env!("CARGO_PKG_VERSION"),
            command,
            label: &config.label,
            seed,
            fingerprint: &self.fingerprint,
            config,
            outputs: &self.outputs,
            untracked: &self.untracked,
        };
        let mut text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Internal(e.to_string()))?;
        text.push('\n');
        self.put("manifest.json", text.as_bytes())?;
        Ok(self.outputs)
    }
}
