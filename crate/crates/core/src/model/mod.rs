//! Hop-level relation graph transformer.
//!
//! Per target node `s`:
//!
//! 1. Project the node token and every relation token from the encoder
//!    dimension into model space.
//! 2. For each hop, run the type block over that hop's relation tokens and
//!    read out a hop token `h^i = sum_j alpha_j u_hat_j` with
//!    `alpha = softmax(u_s . u_hat_j)`.
//! 3. Run the hop block over `[u_s, h^1, .., h^K]`.
//! 4. Read out `z = h_hat^0 + sum_j gamma_j h_hat^j` with
//!    `gamma = softmax_j([h_hat^0 || h_hat^j] W)` over `j = 1..K`.
//!
//! Hops without relation tokens are dropped from the sequence. Both blocks
//! are stacks of pre-LN transformer layers without positional encodings, and
//! their weights are shared across hops and targets.

mod forward;

pub use forward::{
    embed_nodes, forward, hop_block, hop_readout, project, type_block, type_readout, AttentionCapture,
    Batch, BatchBuilder, ForwardOutput, HopTokens,
};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SchemaDef;
use crate::tensor::{read_container, write_container, ParamStore, Tensor};

/// Prefix of classification-head parameter names.
pub const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden dimension.
    pub d: usize,
    /// Attention heads per layer; `d` must be divisible by it.
    pub heads: usize,
    pub type_layers: usize,
    pub hop_layers: usize,
    /// Hops `K`.
    pub hops: usize,
    /// Encoder output dimension.
    pub d_llm: usize,
}

impl ModelConfig {
    pub fn new(d_llm: usize, hops: usize) -> Self {
        Self { d: 128, heads: 4, type_layers: 2, hop_layers: 3, hops, d_llm }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("hidden dim {} is not divisible by {} heads", self.d, self.heads));
        }
        if self.type_layers == 0 || self.hop_layers == 0 {
            return bad("type and hop blocks need at least one layer".into());
        }
        if self.hops == 0 {
            return bad("hop count must be at least 1".into());
        }
        if self.d_llm == 0 {
            return bad("encoder dimension must be positive".into());
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        2 * self.d
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    node_types: Vec<String>,
    /// Classified node type to class vocabulary, for every head present.
    heads: Vec<(String, Vec<String>)>,
}

/// Model configuration plus named parameters.
///
/// Parameter names: `proj.{w,b}`; `type.{l}.*` and `hop.{l}.*` for layer
/// `l` of each block (`ln1.{g,b}`, `wq`, `wk`, `wv`, `wo`, `ln2.{g,b}`,
/// `ffn.{w1,b1,w2,b2}`); `readout.w`; `sim.{type}` per node type; and
/// `head.{type}.{w,b}` once a classification head is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub node_types: Vec<String>,
    pub heads: Vec<(String, Vec<String>)>,
    pub store: ParamStore,
}

impl ModelParams {
    pub fn init(config: ModelConfig, schema: &SchemaDef, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        store.init_uniform("proj.w", config.d_llm, d, &mut rng);
        store.insert("proj.b", Tensor::zeros(1, d));
        for (block, layers) in [("type", config.type_layers), ("hop", config.hop_layers)] {
            for l in 0..layers {
                let p = |n: &str| format!("{block}.{l}.{n}");
                store.insert(p("ln1.g"), Tensor::filled(1, d, 1.0));
                store.insert(p("ln1.b"), Tensor::zeros(1, d));
                for w in ["wq", "wk", "wv", "wo"] {
                    store.init_uniform(&p(w), d, d, &mut rng);
                }
                store.insert(p("ln2.g"), Tensor::filled(1, d, 1.0));
                store.insert(p("ln2.b"), Tensor::zeros(1, d));
                store.init_uniform(&p("ffn.w1"), d, config.ffn_dim(), &mut rng);
                store.insert(p("ffn.b1"), Tensor::zeros(1, config.ffn_dim()));
                store.init_uniform(&p("ffn.w2"), config.ffn_dim(), d, &mut rng);
                store.insert(p("ffn.b2"), Tensor::zeros(1, d));
            }
        }
        store.init_uniform("readout.w", 2 * d, 1, &mut rng);
        for t in &schema.node_types {
            store.init_uniform(&sim_name(t), d, d, &mut rng);
        }
        Ok(Self { config, node_types: schema.node_types.clone(), heads: Vec::new(), store })
    }

    /// Attach (or re-initialize) a `d x C` classification head for
    /// `node_type` with a zero bias.
    pub fn add_head(&mut self, node_type: &str, classes: &[String], seed: u64) -> Result<()> {
        if classes.is_empty() {
            return Err(Error::Config(format!("no classes for node type `{node_type}`")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, b) = head_names(node_type);
        self.store.init_uniform(&w, self.config.d, classes.len(), &mut rng);
        self.store.insert(b, Tensor::zeros(1, classes.len()));
        self.heads.retain(|(t, _)| t != node_type);
        self.heads.push((node_type.to_string(), classes.to_vec()));
        Ok(())
    }

    pub fn head_classes(&self, node_type: &str) -> Option<&[String]> {
        self.heads.iter().find(|(t, _)| t == node_type).map(|(_, c)| c.as_slice())
    }

    /// Hash of every parameter.
    pub fn content_hash(&self) -> String {
        self.store.content_hash(|_| true)
    }

    /// Hash of every parameter outside the classification heads.
    pub fn backbone_hash(&self) -> String {
        self.store.content_hash(|n| !is_head(n))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            node_types: self.node_types.clone(),
            heads: self.heads.clone(),
        };
        let named = self.store.clone().into_named();
        write_container(path, &serde_json::to_string(&meta)?, &named)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, named) = read_container(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&meta)?;
        meta.config.validate()?;
        let params = Self {
            config: meta.config,
            node_types: meta.node_types,
            heads: meta.heads,
            store: ParamStore::from_named(named),
        };
        for name in ["proj.w", "readout.w"] {
            params.store.get(name)?;
        }
        Ok(params)
    }
}

pub fn sim_name(node_type: &str) -> String {
    format!("sim.{node_type}")
}

pub fn head_names(node_type: &str) -> (String, String) {
    (format!("{HEAD_PREFIX}{node_type}.w"), format!("{HEAD_PREFIX}{node_type}.b"))
}

pub fn is_head(name: &str) -> bool {
    name.starts_with(HEAD_PREFIX)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::schema;

    fn small() -> (ModelConfig, SchemaDef) {
        let cfg = ModelConfig { d: 8, heads: 2, type_layers: 2, hop_layers: 3, hops: 2, d_llm: 6 };
        let s = schema(&["a", "b"], &[("ab", "a", "b")]);
        (cfg, s)
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new(16, 2);
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::new(16, 0);
        assert!(c.validate().is_err());
        c.hops = 1;
        c.hop_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let (cfg, s) = small();
        let a = ModelParams::init(cfg.clone(), &s, 3).unwrap();
        let b = ModelParams::init(cfg.clone(), &s, 3).unwrap();
        let c = ModelParams::init(cfg, &s, 4).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
        let w = a.store.get("type.0.wq").unwrap();
        let bound = 1.0 / (8f64).sqrt();
        assert!(w.data().iter().all(|x| x.abs() <= bound));
        assert!(a.store.contains("sim.a") && a.store.contains("hop.2.ffn.w2"));
        assert!(!a.store.contains("type.2.wq"));
    }

    #[test]
    fn head_leaves_backbone_hash() {
        let (cfg, s) = small();
        let mut p = ModelParams::init(cfg, &s, 1).unwrap();
        let before = p.backbone_hash();
        let full = p.content_hash();
        p.add_head("a", &["x".into(), "y".into(), "z".into()], 9).unwrap();
        assert_eq!(p.backbone_hash(), before);
        assert_ne!(p.content_hash(), full);
        assert_eq!(p.store.get("head.a.w").unwrap().shape(), &[8, 3]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (cfg, s) = small();
        let mut p = ModelParams::init(cfg, &s, 1).unwrap();
        p.add_head("b", &["u".into(), "v".into()], 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        p.save(&path).unwrap();
        let q = ModelParams::load(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.head_classes("b").unwrap().len(), 2);
    }
}
