//! Run metadata written next to every output file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    /// Subcommand or stage that produced the output.
    pub command: String,
    pub version: String,
    pub seeds: Vec<u64>,
    /// Effective configuration of the stage.
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chosen_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs_run: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pooling: Option<String>,
    /// Content hashes of checkpoints read or written, by role.
    pub hashes: Vec<(String, String)>,
    /// Stage-specific results.
    pub results: serde_json::Value,
}

impl RunMetadata {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            ..Default::default()
        }
    }

    /// `<output>.meta.json`.
    pub fn path_for(output: &Path) -> PathBuf {
        let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".meta.json");
        output.with_file_name(name)
    }

    /// Write next to `output` and return the metadata path.
    pub fn write_for(&self, output: &Path) -> Result<PathBuf> {
        let path = Self::path_for(output);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sits_next_to_output() {
        assert_eq!(RunMetadata::path_for(Path::new("out/run.csv")), PathBuf::from("out/run.csv.meta.json"));
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("model.ckpt");
        let mut m = RunMetadata::new("pretrain");
        m.seeds = vec![3];
        m.chosen_lr = Some(1e-3);
        let p = m.write_for(&out).unwrap();
        assert_eq!(RunMetadata::read(&p).unwrap(), m);
    }
}
