//! On-disk artifacts. Every JSON artifact carries the format version, the
//! resolved config and its hash.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use nap_core::expert::SeedRange;
use nap_core::neural::ModelParams;
use nap_core::training::NapModel;

use crate::config::{ResolvedConfig, FORMAT_VERSION};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub format_version: u32,
    pub config_hash: String,
    pub config: ResolvedConfig,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Envelope<T> {
    pub fn new(config: &ResolvedConfig, body: T) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config_hash: config.hash(),
            config: config.clone(),
            body,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum CheckpointModel {
    Nap(NapModel),
    Bc(ModelParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub train_seeds: SeedRange,
    #[serde(flatten)]
    pub model: CheckpointModel,
}

pub type CheckpointFile = Envelope<Checkpoint>;

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact types serialize");
    s.push('\n');
    s
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_text(path, &to_json(value))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> CliResult<CheckpointFile> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
    let ckpt: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
    if ckpt.format_version != FORMAT_VERSION {
        return Err(CliError::Checkpoint(format!(
            "{}: format version {} is not supported",
            path.display(),
            ckpt.format_version
        )));
    }
    let valid = match &ckpt.body.model {
        CheckpointModel::Nap(m) => m.cost.validate().and_then(|_| m.position.validate()),
        CheckpointModel::Bc(p) => p.validate(),
    };
    valid.map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(ckpt)
}
