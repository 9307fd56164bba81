use std::path::{Path, PathBuf};

use ctdg_core::bounds::VerifySpec;
use ctdg_core::model::ModelConfig;
use ctdg_core::synth::DatasetSpec;
use ctdg_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// One experiment file. Each command reads the sections it needs and
/// rejects the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Generated in memory; reseeded with each run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    /// A directory written by `gen`, or a bare event CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    /// Saved parameters (`params.json` from `train`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowSpec>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    #[serde(default = "default_layers")]
    pub layers: Vec<usize>,
    /// How many trailing events of the log to measure.
    #[serde(default = "default_events")]
    pub events: usize,
}

fn default_layers() -> Vec<usize> {
    vec![1, 2, 3]
}

fn default_events() -> usize {
    50
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Dataset,
    Data,
    Model,
    Train,
    Params,
    Verify,
    Flow,
}

impl Section {
    fn name(self) -> &'static str {
        match self {
            Section::Dataset => "dataset",
            Section::Data => "data",
            Section::Model => "model",
            Section::Train => "train",
            Section::Params => "params",
            Section::Verify => "verify",
            Section::Flow => "flow",
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::BadInput(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::BadInput(format!("config {}: {e}", path.display())))?;
        cfg.base = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        Ok(cfg)
    }

    /// Paths in the file are relative to the file itself.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_relative() {
            self.base.join(p)
        } else {
            p.to_path_buf()
        }
    }

    fn present(&self) -> Vec<Section> {
        let mut s = Vec::new();
        if self.dataset.is_some() {
            s.push(Section::Dataset);
        }
        if self.data.is_some() {
            s.push(Section::Data);
        }
        if self.model.is_some() {
            s.push(Section::Model);
        }
        if self.train.is_some() {
            s.push(Section::Train);
        }
        if self.params.is_some() {
            s.push(Section::Params);
        }
        if self.verify.is_some() {
            s.push(Section::Verify);
        }
        if self.flow.is_some() {
            s.push(Section::Flow);
        }
        s
    }

    /// Fails on any section outside `allowed`.
    pub fn only(&self, command: &str, allowed: &[Section]) -> Result<(), CliError> {
        let extra: Vec<&str> = self
            .present()
            .into_iter()
            .filter(|s| !allowed.contains(s))
            .map(Section::name)
            .collect();
        if extra.is_empty() {
            Ok(())
        } else {
            Err(CliError::BadInput(format!("`{command}` does not use section(s): {}", extra.join(", "))))
        }
    }

    /// Hex sha256 of the config as run, without the output location.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn require<'a, T>(x: &'a Option<T>, what: &str, command: &str) -> Result<&'a T, CliError> {
    x.as_ref()
        .ok_or_else(|| CliError::BadInput(format!("`{command}` needs a `{what}` section")))
}
