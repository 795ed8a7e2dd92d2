//! Synthetic graph generators: planted-partition heterogeneous graphs,
//! complete typed trees, and class-correlated node tokens.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeTypeDef, GraphBuilder, HeteroGraph, NodeIdx, SchemaDef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthNodeType {
    pub name: String,
    pub count: usize,
    /// Attach a short text string to every node of this type.
    #[serde(default)]
    pub with_text: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEdgeType {
    pub name: String,
    pub src: String,
    pub dst: String,
    pub p_intra: f64,
    pub p_inter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub node_types: Vec<SynthNodeType>,
    pub edge_types: Vec<SynthEdgeType>,
    pub classes: usize,
    pub domain_blurb: String,
    /// Node types that receive a label vocabulary `class0..class{C-1}`.
    #[serde(default)]
    pub labeled_types: Vec<String>,
}

impl SynthConfig {
    pub fn schema(&self) -> SchemaDef {
        let labels: Vec<String> = (0..self.classes).map(|c| format!("class{c}")).collect();
        SchemaDef {
            node_types: self.node_types.iter().map(|t| t.name.clone()).collect(),
            edge_types: self
                .edge_types
                .iter()
                .map(|e| EdgeTypeDef {
                    name: e.name.clone(),
                    src: e.src.clone(),
                    dst: e.dst.clone(),
                })
                .collect(),
            domain_blurb: self.domain_blurb.clone(),
            class_labels: self
                .labeled_types
                .iter()
                .map(|t| (t.clone(), labels.clone()))
                .collect::<BTreeMap<_, _>>(),
            label_noun: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        for e in &self.edge_types {
            for (what, p) in [("p_intra", e.p_intra), ("p_inter", e.p_inter)] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!(
                        "{what} of edge type `{}` is {p}, outside [0, 1]",
                        e.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Planted-partition generator. Node `i` of each type belongs to class
/// `i * C / count` (contiguous, balanced blocks). Every admissible node pair
/// of each edge type is an edge independently with probability `p_intra`
/// when the classes agree and `p_inter` otherwise. Same-type edge types only
/// consider unordered pairs of distinct nodes.
///
/// Returns the graph and the class of every node, indexed by [`NodeIdx`].
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<(HeteroGraph, Vec<usize>)> {
    cfg.validate()?;
    let mut b = GraphBuilder::new(cfg.schema())?;
    let mut labels = Vec::new();
    let mut members: BTreeMap<&str, Vec<NodeIdx>> = BTreeMap::new();
    for nt in &cfg.node_types {
        for i in 0..nt.count {
            let class = i * cfg.classes / nt.count.max(1);
            let id = format!("{}{}", nt.name, i);
            let text = nt.with_text.then(|| format!("{} {} of group {}", nt.name, i, class));
            let v = b.add_node(&id, &nt.name, text.as_deref())?;
            members.entry(nt.name.as_str()).or_default().push(v);
            labels.push(class);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in &cfg.edge_types {
        let et = b.schema().edge_type(&e.name).expect("schema built from cfg");
        let srcs = members.get(e.src.as_str()).cloned().unwrap_or_default();
        let dsts = members.get(e.dst.as_str()).cloned().unwrap_or_default();
        let same = e.src == e.dst;
        for (i, &s) in srcs.iter().enumerate() {
            let start = if same { i + 1 } else { 0 };
            for &d in &dsts[start..] {
                let p = if labels[s] == labels[d] { e.p_intra } else { e.p_inter };
                if rng.gen::<f64>() < p {
                    b.add_edge_idx(s, d, et)?;
                }
            }
        }
    }
    Ok((b.build(), labels))
}

/// Complete tree with the given branching factor and depth. Depth level `l`
/// holds nodes of type `level{l}`, and each parent-child pair is joined by
/// an edge of type `down{l}`. Node 0 is the root. Every node carries text.
pub fn complete_typed_tree(branching: usize, depth: usize) -> Result<HeteroGraph> {
    let schema = SchemaDef {
        node_types: (0..=depth).map(|l| format!("level{l}")).collect(),
        edge_types: (0..depth)
            .map(|l| EdgeTypeDef {
                name: format!("down{l}"),
                src: format!("level{l}"),
                dst: format!("level{}", l + 1),
            })
            .collect(),
        domain_blurb: "a hierarchy".into(),
        class_labels: BTreeMap::new(),
        label_noun: None,
    };
    let mut b = GraphBuilder::new(schema)?;
    let root = b.add_node("n0", "level0", Some("root node"))?;
    let mut frontier = vec![root];
    let mut next_id = 1usize;
    for l in 0..depth {
        let mut next = Vec::with_capacity(frontier.len() * branching);
        for &p in &frontier {
            for _ in 0..branching {
                let id = format!("n{next_id}");
                let text = format!("node {next_id} at level {}", l + 1);
                let c = b.add_node(&id, &format!("level{}", l + 1), Some(&text))?;
                next_id += 1;
                b.add_edge_idx(p, c, l)?;
                next.push(c);
            }
        }
        frontier = next;
    }
    Ok(b.build())
}

/// Class-correlated node tokens: each class gets a prototype drawn uniformly
/// from `[-1, 1]^dim`, and node `v` receives its class prototype plus
/// i.i.d. Gaussian noise with standard deviation `sigma`.
pub fn class_correlated_tokens(
    labels: &[usize],
    dim: usize,
    sigma: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect())
        .collect();
    labels
        .iter()
        .map(|&c| {
            prototypes[c]
                .iter()
                .map(|&x| x + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}
