//! Fixtures shared by the benchmarks.

use std::collections::BTreeMap;
use std::sync::Arc;

use hetrel_core::encoder::{tokenize_graph_with_nodes, EmbeddingCache, Encoder, MockBackend, TokenizeConfig};
use hetrel_core::graph::NodeIdx;
use hetrel_core::prompt::TemplateId;
use hetrel_core::synth::{class_correlated_tokens, synth_generate, SynthConfig, SynthEdgeType, SynthNodeType};
use hetrel_core::{HeteroGraph, ModelConfig, TokenTable};

/// Paper/author/organization graph with three planted classes.
pub fn academic_graph(papers: usize, seed: u64) -> (HeteroGraph, Vec<usize>) {
    let cfg = SynthConfig {
        node_types: vec![
            SynthNodeType { name: "paper".into(), count: papers, with_text: true },
            SynthNodeType { name: "author".into(), count: papers, with_text: true },
            SynthNodeType { name: "organization".into(), count: papers / 10 + 1, with_text: true },
        ],
        edge_types: vec![
            SynthEdgeType { name: "writes".into(), src: "author".into(), dst: "paper".into(), p_intra: 6.0 / papers as f64, p_inter: 0.6 / papers as f64 },
            SynthEdgeType { name: "cites".into(), src: "paper".into(), dst: "paper".into(), p_intra: 4.0 / papers as f64, p_inter: 0.4 / papers as f64 },
            SynthEdgeType { name: "belongs to".into(), src: "author".into(), dst: "organization".into(), p_intra: 10.0 / papers as f64, p_inter: 1.0 / papers as f64 },
        ],
        classes: 3,
        domain_blurb: "an academic network".into(),
        labeled_types: vec!["paper".into()],
    };
    synth_generate(&cfg, seed).expect("valid synthetic config")
}

pub fn mock_encoder(dim: usize) -> Encoder {
    Encoder::new(Arc::new(MockBackend::new(dim)), Arc::new(EmbeddingCache::in_memory()))
}

/// Token table over every node, with class-correlated node tokens.
pub fn token_table(g: &HeteroGraph, labels: &[usize], dim: usize, hops: usize) -> TokenTable {
    let preset: BTreeMap<NodeIdx, Vec<f64>> =
        class_correlated_tokens(labels, dim, 0.5, 0).into_iter().enumerate().collect();
    let all: Vec<NodeIdx> = (0..g.num_nodes()).collect();
    tokenize_graph_with_nodes(&mock_encoder(dim), g, &all, &TokenizeConfig::new(hops, TemplateId::PretrainLink), preset)
        .expect("tokenize")
}

pub fn model_config(dim: usize, hops: usize) -> ModelConfig {
    ModelConfig { d: 32, heads: 4, type_layers: 2, hop_layers: 3, hops, d_llm: dim }
}
