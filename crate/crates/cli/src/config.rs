use std::path::Path;

use anyhow::{Context, Result};
use hetrel_core::model::ModelConfig;
use hetrel_core::train::{FinetuneConfig, PretrainConfig};
use serde::{Deserialize, Serialize};

/// Backbone sizes. The input dimension and hop count come from the token
/// table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub heads: usize,
    pub type_layers: usize,
    pub hop_layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::new(1, 1);
        Self { d: c.d, heads: c.heads, type_layers: c.type_layers, hop_layers: c.hop_layers }
    }
}

impl ModelSection {
    pub fn build(&self, d_llm: usize, hops: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            heads: self.heads,
            type_layers: self.type_layers,
            hop_layers: self.hop_layers,
            hops,
            d_llm,
        }
    }
}

/// Contents of the `--config` TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
