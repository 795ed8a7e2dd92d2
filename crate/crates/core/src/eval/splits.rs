use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Edge, HeteroGraph, NodeIdx};
use crate::train::{NegativeSampler, Pair};

/// Labeled nodes used for training and validation, per class.
pub const NODES_PER_CLASS: usize = 100;
/// Share of edges that become link-prediction positives.
pub const LINK_POSITIVE_SHARE: f64 = 0.8;
/// Negatives per positive in every link part.
pub const LINK_NEGATIVE_RATIO: usize = 2;

/// Class labels for the nodes of one type.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeLabels {
    pub node_type: String,
    pub classes: Vec<String>,
    pub labels: BTreeMap<NodeIdx, usize>,
}

impl NodeLabels {
    /// Labels for `node_type` with the class vocabulary declared in the
    /// schema.
    pub fn new(g: &HeteroGraph, node_type: &str, labels: BTreeMap<NodeIdx, usize>) -> Result<Self> {
        let t = g
            .schema()
            .node_type(node_type)
            .ok_or_else(|| Error::UnknownNodeType(node_type.to_string()))?;
        let classes = g
            .schema()
            .labels_for(node_type)
            .filter(|c| !c.is_empty())
            .ok_or_else(|| Error::Split(format!("node type `{node_type}` has no class labels")))?
            .to_vec();
        for (&v, &c) in &labels {
            if g.node_type(v) != t {
                return Err(Error::Split(format!(
                    "`{}` is a `{}`, not a `{node_type}`",
                    g.node_id(v),
                    g.node_type_name(v)
                )));
            }
            if c >= classes.len() {
                return Err(Error::Split(format!("class index {c} out of range for `{node_type}`")));
            }
        }
        Ok(Self { node_type: node_type.to_string(), classes, labels })
    }

    /// Read a `node_id,label` CSV with a header row.
    pub fn from_csv(g: &HeteroGraph, node_type: &str, path: &Path) -> Result<Self> {
        let classes = g.schema().labels_for(node_type).unwrap_or(&[]).to_vec();
        let mut rdr = csv::Reader::from_path(path)?;
        let mut labels = BTreeMap::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let (Some(id), Some(label)) = (row.get(0), row.get(1)) else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 2,
                    msg: "expected node_id,label".into(),
                });
            };
            let v = g.node_index(id)?;
            let c = classes.iter().position(|c| c == label).ok_or_else(|| {
                Error::Split(format!("label `{label}` of `{id}` is not a class of `{node_type}`"))
            })?;
            labels.insert(v, c);
        }
        Self::new(g, node_type, labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeSplit {
    pub node_type: String,
    pub classes: Vec<String>,
    pub train: Vec<(NodeIdx, usize)>,
    pub val: Vec<(NodeIdx, usize)>,
    pub test: Vec<(NodeIdx, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LinkPart {
    pub positives: Vec<Pair>,
    pub negatives: Vec<Pair>,
}

impl LinkPart {
    /// Positives then negatives, with their labels.
    pub fn labeled(&self) -> Vec<(Pair, bool)> {
        self.positives
            .iter()
            .map(|&p| (p, true))
            .chain(self.negatives.iter().map(|&p| (p, false)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSplit {
    pub train: LinkPart,
    pub val: LinkPart,
    pub test: LinkPart,
    /// Edges behind the validation and test positives; drop them from the
    /// graph before tokenizing or training.
    pub held_out_edges: Vec<Edge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    NodeClassification,
    LinkPrediction,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitSpec {
    Node(NodeSplit),
    Link(LinkSplit),
}

/// Per class: `NODES_PER_CLASS` train, as many validation, the rest test.
/// A class with fewer than twice that many nodes is halved between train
/// and validation and contributes nothing to test.
pub fn node_split(labels: &NodeLabels, seed: u64) -> Result<NodeSplit> {
    let mut by_class: Vec<Vec<NodeIdx>> = vec![Vec::new(); labels.classes.len()];
    for (&v, &c) in &labels.labels {
        by_class[c].push(v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = NodeSplit {
        node_type: labels.node_type.clone(),
        classes: labels.classes.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (c, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Split(format!("class `{}` has no labeled nodes", labels.classes[c])));
        }
        members.shuffle(&mut rng);
        let (n_train, n_val) = if members.len() >= 2 * NODES_PER_CLASS {
            (NODES_PER_CLASS, NODES_PER_CLASS)
        } else {
            log::warn!(
                "class `{}` has only {} labeled nodes; using all of them for train and validation",
                labels.classes[c],
                members.len()
            );
            let h = members.len().div_ceil(2);
            (h, members.len() - h)
        };
        let label = |v: &NodeIdx| (*v, c);
        split.train.extend(members[..n_train].iter().map(label));
        split.val.extend(members[n_train..n_train + n_val].iter().map(label));
        split.test.extend(members[n_train + n_val..].iter().map(label));
    }
    Ok(split)
}

/// `LINK_POSITIVE_SHARE` of the edges become positives, split 8:1:1
/// (validation and test get a tenth each, rounded down). Each part gets
/// `LINK_NEGATIVE_RATIO` non-edges per positive, distinct across parts.
pub fn link_split(g: &HeteroGraph, seed: u64) -> Result<LinkSplit> {
    if g.num_edges() == 0 {
        return Err(Error::Split("the graph has no edges".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = g.edges().to_vec();
    edges.shuffle(&mut rng);
    let p = (edges.len() as f64 * LINK_POSITIVE_SHARE).floor() as usize;
    if p < 10 {
        return Err(Error::Split(format!("{} edges are too few for an 8:1:1 split", edges.len())));
    }
    edges.truncate(p);
    let n_eval = p / 10;
    let test_edges = edges.split_off(p - n_eval);
    let val_edges = edges.split_off(p - 2 * n_eval);
    let train_edges = edges;

    let sampler = NegativeSampler::new(g);
    let mut used: HashSet<Pair> = HashSet::new();
    let mut part = |es: &[Edge]| -> Result<LinkPart> {
        let mut lp = LinkPart::default();
        for e in es {
            lp.positives.push((e.src, e.dst));
            for _ in 0..LINK_NEGATIVE_RATIO {
                let n = sampler.corrupt(e.etype, (e.src, e.dst), &mut rng, &used)?;
                used.insert((n.0.min(n.1), n.0.max(n.1)));
                lp.negatives.push(n);
            }
        }
        Ok(lp)
    };
    let train = part(&train_edges)?;
    let val = part(&val_edges)?;
    let test = part(&test_edges)?;
    let held_out_edges = val_edges.into_iter().chain(test_edges).collect();
    Ok(LinkSplit { train, val, test, held_out_edges })
}

/// Dispatch on `task`. Node classification needs `labels`.
pub fn build_splits(g: &HeteroGraph, labels: Option<&NodeLabels>, task: Task, seed: u64) -> Result<SplitSpec> {
    match task {
        Task::NodeClassification => {
            let labels = labels.ok_or_else(|| Error::Split("node classification needs labels".into()))?;
            node_split(labels, seed).map(SplitSpec::Node)
        }
        Task::LinkPrediction => link_split(g, seed).map(SplitSpec::Link),
    }
}
