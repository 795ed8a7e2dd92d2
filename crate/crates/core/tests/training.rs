//! Pre-training followed by fine-tuning on a small planted graph.

use std::collections::BTreeMap;
use std::sync::Arc;

use hetrel_core::encoder::{tokenize_graph, EmbeddingCache, Encoder, MockBackend, TokenizeConfig};
use hetrel_core::eval::{node_split, NodeLabels};
use hetrel_core::model::is_head;
use hetrel_core::prompt::TemplateId;
use hetrel_core::synth::{synth_generate, SynthConfig, SynthEdgeType, SynthNodeType};
use hetrel_core::train::{finetune, pretrain, FinetuneConfig, PretrainConfig};
use hetrel_core::{Error, ModelConfig, ModelParams};

fn fixture() -> (hetrel_core::HeteroGraph, Vec<usize>) {
    let cfg = SynthConfig {
        node_types: vec![
            SynthNodeType { name: "paper".into(), count: 240, with_text: true },
            SynthNodeType { name: "author".into(), count: 120, with_text: true },
        ],
        edge_types: vec![SynthEdgeType {
            name: "writes".into(),
            src: "author".into(),
            dst: "paper".into(),
            p_intra: 0.05,
            p_inter: 0.005,
        }],
        classes: 2,
        domain_blurb: "an academic network".into(),
        labeled_types: vec!["paper".into()],
    };
    synth_generate(&cfg, 4).unwrap()
}

#[test]
fn finetune_touches_only_the_head() {
    let (g, labels) = fixture();
    let enc = Encoder::new(Arc::new(MockBackend::new(8)), Arc::new(EmbeddingCache::in_memory()));
    let all: Vec<usize> = (0..g.num_nodes()).collect();
    let table = tokenize_graph(&enc, &g, &all, &TokenizeConfig::new(2, TemplateId::PretrainLink)).unwrap();
    let cfg = ModelConfig { d: 8, heads: 2, type_layers: 1, hop_layers: 1, hops: 2, d_llm: 8 };
    let params = ModelParams::init(cfg, g.schema(), 1).unwrap();
    let pc = PretrainConfig { max_epochs: 3, lr: 1e-3, ..Default::default() };
    let pre = pretrain(&g, &table, params, &pc, 1).unwrap();
    assert_eq!(pre.history.len(), 3);

    let papers = g.nodes_of_type(0);
    let ft_table = tokenize_graph(&enc, &g, papers, &TokenizeConfig::new(2, TemplateId::FinetuneClassify)).unwrap();
    let map: BTreeMap<usize, usize> = papers.iter().map(|&v| (v, labels[v])).collect();
    let split = node_split(&NodeLabels::new(&g, "paper", map).unwrap(), 0).unwrap();
    let fc = FinetuneConfig { max_epochs: 40, ..Default::default() };
    let ft = finetune(&g, &ft_table, pre.params.clone(), &split, &fc, 2).unwrap();

    assert_eq!(ft.backbone_hash_before, ft.backbone_hash_after);
    assert_eq!(ft.params.backbone_hash(), pre.params.backbone_hash());
    for (name, t) in ft.params.store.iter() {
        if is_head(name) {
            assert!(!pre.params.store.contains(name));
        } else {
            assert_eq!(t, pre.params.store.get(name).unwrap(), "{name}");
        }
    }
    assert_eq!(ft.grid.len(), 3);
    assert_eq!(ft.test_predictions.len(), split.test.len());
    assert!((0.0..=1.0).contains(&ft.test_micro_f1));
}

#[test]
fn unlabeled_type_is_rejected() {
    let (g, _) = fixture();
    assert!(matches!(NodeLabels::new(&g, "author", BTreeMap::new()), Err(Error::Split(_))));
    assert!(matches!(NodeLabels::new(&g, "venue", BTreeMap::new()), Err(Error::UnknownNodeType(_))));
}
