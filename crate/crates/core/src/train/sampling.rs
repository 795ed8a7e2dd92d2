use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{EdgeTypeIdx, HeteroGraph, NodeIdx};

/// Rejection attempts per negative before falling back to enumerating the
/// complement.
const MAX_TRIES: usize = 64;

pub type Pair = (NodeIdx, NodeIdx);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TypeSamples {
    pub positives: Vec<Pair>,
    pub negatives: Vec<Pair>,
}

/// Positive and negative node pairs per relation type.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeSampleSet {
    pub by_type: BTreeMap<EdgeTypeIdx, TypeSamples>,
}

impl EdgeSampleSet {
    pub fn num_positives(&self) -> usize {
        self.by_type.values().map(|s| s.positives.len()).sum()
    }

    pub fn num_negatives(&self) -> usize {
        self.by_type.values().map(|s| s.negatives.len()).sum()
    }

    /// Every node appearing in any pair, ascending.
    pub fn nodes(&self) -> Vec<NodeIdx> {
        let mut v: Vec<NodeIdx> = self
            .by_type
            .values()
            .flat_map(|s| s.positives.iter().chain(&s.negatives))
            .flat_map(|&(a, b)| [a, b])
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// All pairs with a positive flag, in type order, positives first.
    pub fn labeled_pairs(&self) -> Vec<(Pair, bool)> {
        self.by_type
            .values()
            .flat_map(|s| {
                s.positives.iter().map(|&p| (p, true)).chain(s.negatives.iter().map(|&p| (p, false)))
            })
            .collect()
    }
}

fn adjacent(g: &HeteroGraph, a: NodeIdx, b: NodeIdx) -> bool {
    g.neighbors(a).binary_search(&b).is_ok()
}

fn key(a: NodeIdx, b: NodeIdx) -> Pair {
    (a.min(b), a.max(b))
}

/// Draws non-adjacent node pairs whose endpoint types match an edge type.
pub(crate) struct NegativeSampler<'g> {
    g: &'g HeteroGraph,
}

impl<'g> NegativeSampler<'g> {
    pub(crate) fn new(g: &'g HeteroGraph) -> Self {
        Self { g }
    }

    /// Whether some admissible pair of type `et` is not an edge.
    pub(crate) fn has_complement(&self, et: EdgeTypeIdx) -> bool {
        let (ts, td) = self.g.schema().edge_endpoints(et);
        let srcs = self.g.nodes_of_type(ts);
        let dsts = self.g.nodes_of_type(td);
        let total = if ts == td {
            srcs.len() * srcs.len().saturating_sub(1) / 2
        } else {
            srcs.len() * dsts.len()
        };
        let mut linked = 0usize;
        for &s in srcs {
            linked += self.g.neighbors(s).iter().filter(|&&n| self.g.node_type(n) == td).count();
        }
        if ts == td {
            linked /= 2;
        }
        linked < total
    }

    /// One negative for positive `(s, t)` of type `et`: keep one endpoint,
    /// replace the other with a uniformly drawn node of the same type, and
    /// reject self pairs, adjacent pairs and pairs in `exclude`.
    pub(crate) fn corrupt(
        &self,
        et: EdgeTypeIdx,
        (s, t): Pair,
        rng: &mut ChaCha8Rng,
        exclude: &HashSet<Pair>,
    ) -> Result<Pair> {
        let (ts, td) = self.g.schema().edge_endpoints(et);
        let ok = |a: NodeIdx, b: NodeIdx| a != b && !adjacent(self.g, a, b) && !exclude.contains(&key(a, b));
        for _ in 0..MAX_TRIES {
            let cand = if rng.gen_bool(0.5) {
                (*self.g.nodes_of_type(ts).choose(rng).expect("endpoint type has nodes"), t)
            } else {
                (s, *self.g.nodes_of_type(td).choose(rng).expect("endpoint type has nodes"))
            };
            if ok(cand.0, cand.1) {
                return Ok(cand);
            }
        }
        let pool: Vec<Pair> = self
            .g
            .nodes_of_type(ts)
            .iter()
            .flat_map(|&a| self.g.nodes_of_type(td).iter().map(move |&b| (a, b)))
            .filter(|&(a, b)| ok(a, b))
            .collect();
        pool.choose(rng).copied().ok_or_else(|| {
            Error::Sampling(format!(
                "no non-edge left for relation `{}`",
                self.g.schema().edge_types[et].name
            ))
        })
    }
}

/// Positives: every edge, grouped by relation type. Negatives: `ratio` per
/// positive, drawn by corrupting one endpoint (see [`NegativeSampler`]).
/// Deterministic under `seed`.
pub fn sample_edges(g: &HeteroGraph, ratio: usize, seed: u64) -> Result<EdgeSampleSet> {
    let mut by_type: BTreeMap<EdgeTypeIdx, Vec<Pair>> = BTreeMap::new();
    for e in g.edges() {
        by_type.entry(e.etype).or_default().push((e.src, e.dst));
    }
    let mut set = EdgeSampleSet::default();
    for (et, positives) in by_type {
        set.by_type.insert(et, TypeSamples { positives, negatives: Vec::new() });
    }
    resample_negatives(g, &mut set, ratio, seed, &HashSet::new())?;
    Ok(set)
}

/// Replace the negatives of every type with `ratio` fresh draws per
/// positive, avoiding `exclude`.
pub fn resample_negatives(
    g: &HeteroGraph,
    set: &mut EdgeSampleSet,
    ratio: usize,
    seed: u64,
    exclude: &HashSet<Pair>,
) -> Result<()> {
    if ratio < 1 {
        return Err(Error::Config("negative ratio must be at least 1".into()));
    }
    let sampler = NegativeSampler::new(g);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (&et, s) in set.by_type.iter_mut() {
        if !sampler.has_complement(et) {
            return Err(Error::Sampling(format!(
                "relation `{}` is complete; no negatives exist",
                g.schema().edge_types[et].name
            )));
        }
        s.negatives.clear();
        for &p in &s.positives {
            for _ in 0..ratio {
                s.negatives.push(sampler.corrupt(et, p, &mut rng, exclude)?);
            }
        }
    }
    Ok(())
}

/// Split the positives of every type: a shuffled `fraction` (at least one
/// when a type has two or more positives) goes to the second set. Negatives
/// are not copied.
pub fn hold_out(set: &EdgeSampleSet, fraction: f64, seed: u64) -> (EdgeSampleSet, EdgeSampleSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = EdgeSampleSet::default();
    let mut held = EdgeSampleSet::default();
    for (&et, s) in &set.by_type {
        let mut pos = s.positives.clone();
        pos.shuffle(&mut rng);
        let mut n = (pos.len() as f64 * fraction).round() as usize;
        if n == 0 && pos.len() >= 2 && fraction > 0.0 {
            n = 1;
        }
        let rest = pos.split_off(n);
        held.by_type.insert(et, TypeSamples { positives: pos, negatives: Vec::new() });
        keep.by_type.insert(et, TypeSamples { positives: rest, negatives: Vec::new() });
    }
    (keep, held)
}
