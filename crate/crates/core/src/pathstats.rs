//! Typed walk statistics around a target node.
//!
//! A walk of length `i` from `s` is any sequence of `i` edge traversals
//! starting at `s`; nodes may repeat and immediate backtracking is allowed.
//! Walks ending back at `s` are excluded everywhere. Parallel edges of
//! different types between the same pair count once (walks are node
//! sequences).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{HeteroGraph, NodeIdx, TypeIdx};

pub const DEFAULT_MAX_WALKS: u64 = 1_000_000;

/// A node-type sequence of length `hop + 1`, starting at the target's type.
pub type Pattern = Vec<TypeIdx>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PatternStat {
    pub count: u64,
    /// `count` divided by the number of walks of this hop ending at a node
    /// of the pattern's endpoint type.
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaPathProfile {
    pub target: NodeIdx,
    pub hop: usize,
    pub patterns: BTreeMap<Pattern, PatternStat>,
}

impl MetaPathProfile {
    fn from_counts(target: NodeIdx, hop: usize, counts: BTreeMap<Pattern, u64>) -> Self {
        let mut totals: BTreeMap<TypeIdx, u64> = BTreeMap::new();
        for (p, c) in &counts {
            *totals.entry(*p.last().expect("nonempty pattern")).or_default() += c;
        }
        let patterns = counts
            .into_iter()
            .map(|(p, count)| {
                let total = totals[p.last().unwrap()];
                let proportion = if total == 0 { 0.0 } else { count as f64 / total as f64 };
                (p, PatternStat { count, proportion })
            })
            .collect();
        Self { target, hop, patterns }
    }

    /// Patterns ending at node type `t`, in pattern order.
    pub fn ending_at(&self, t: TypeIdx) -> impl Iterator<Item = (&Pattern, &PatternStat)> {
        self.patterns.iter().filter(move |(p, _)| p.last() == Some(&t))
    }

    /// Copy restricted to patterns ending at `t`.
    pub fn restricted_to(&self, t: TypeIdx) -> MetaPathProfile {
        MetaPathProfile {
            target: self.target,
            hop: self.hop,
            patterns: self
                .ending_at(t)
                .map(|(p, s)| (p.clone(), *s))
                .collect(),
        }
    }

    /// Total walks ending at a type-`t` node.
    pub fn walks_ending_at(&self, t: TypeIdx) -> u64 {
        self.ending_at(t).map(|(_, s)| s.count).sum()
    }

    pub fn total_walks(&self) -> u64 {
        self.patterns.values().map(|s| s.count).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopTypeNeighborhood {
    pub target: NodeIdx,
    pub hop: usize,
    pub node_type: TypeIdx,
    pub members: BTreeSet<NodeIdx>,
}

/// Every walk of exactly `hop` edges from `s`, as node sequences, in
/// lexicographic order of neighbor indices.
pub fn enumerate_walks(
    g: &HeteroGraph,
    s: NodeIdx,
    hop: usize,
    max_walks: u64,
) -> Result<Vec<Vec<NodeIdx>>> {
    check_node(g, s)?;
    check_hop(hop)?;
    let mut out = Vec::new();
    let mut path = vec![s];
    walk_dfs(g, s, hop, &mut path, &mut out, max_walks)?;
    Ok(out)
}

fn walk_dfs(
    g: &HeteroGraph,
    s: NodeIdx,
    hop: usize,
    path: &mut Vec<NodeIdx>,
    out: &mut Vec<Vec<NodeIdx>>,
    cap: u64,
) -> Result<()> {
    let last = *path.last().unwrap();
    if path.len() == hop + 1 {
        if last != s {
            if out.len() as u64 >= cap {
                return Err(Error::WalkCap { node: g.node_id(s).to_string(), hop, cap });
            }
            out.push(path.clone());
        }
        return Ok(());
    }
    for &n in g.neighbors(last) {
        path.push(n);
        walk_dfs(g, s, hop, path, out, cap)?;
        path.pop();
    }
    Ok(())
}

/// Pattern counts and proportions for walks of length `hop` from `s`.
pub fn meta_path_profile(
    g: &HeteroGraph,
    s: NodeIdx,
    hop: usize,
    max_walks: u64,
) -> Result<MetaPathProfile> {
    check_hop(hop)?;
    let mut all = hop_profiles(g, s, hop, max_walks)?;
    Ok(all.pop().expect("hop >= 1").profile)
}

/// Nodes of type `t` at the end of some length-`hop` walk from `s`,
/// excluding `s`.
pub fn hop_type_neighbors(
    g: &HeteroGraph,
    s: NodeIdx,
    hop: usize,
    t: TypeIdx,
) -> Result<HopTypeNeighborhood> {
    check_node(g, s)?;
    check_hop(hop)?;
    if t >= g.num_node_types() {
        return Err(Error::UnknownNodeType(format!("#{t}")));
    }
    let reach = reach_sets(g, s, hop);
    let members = reach[hop - 1]
        .iter()
        .copied()
        .filter(|&v| v != s && g.node_type(v) == t)
        .collect();
    Ok(HopTypeNeighborhood { target: s, hop, node_type: t, members })
}

/// Profile and endpoint sets for one hop, as produced by [`hop_profiles`].
#[derive(Debug, Clone)]
pub struct HopSummary {
    pub profile: MetaPathProfile,
    /// Walk endpoints (excluding the target) grouped by node type; only
    /// types with at least one endpoint appear.
    pub neighborhoods: BTreeMap<TypeIdx, BTreeSet<NodeIdx>>,
}

impl HopSummary {
    pub fn neighborhood(&self, t: TypeIdx) -> HopTypeNeighborhood {
        HopTypeNeighborhood {
            target: self.profile.target,
            hop: self.profile.hop,
            node_type: t,
            members: self.neighborhoods.get(&t).cloned().unwrap_or_default(),
        }
    }

    pub fn types_present(&self) -> impl Iterator<Item = TypeIdx> + '_ {
        self.neighborhoods.keys().copied()
    }
}

/// Profiles and typed endpoint sets for hops `1..=max_hop` in one pass.
///
/// Counts are propagated over (node, pattern) states instead of enumerating
/// walks, so the cost is bounded by the number of distinct states rather
/// than the number of walks. `max_walks` still caps the per-hop walk total.
pub fn hop_profiles(
    g: &HeteroGraph,
    s: NodeIdx,
    max_hop: usize,
    max_walks: u64,
) -> Result<Vec<HopSummary>> {
    check_node(g, s)?;
    check_hop(max_hop)?;
    let mut patterns: Vec<Pattern> = vec![vec![g.node_type(s)]];
    let mut pattern_ids: HashMap<Pattern, usize> = HashMap::new();
    pattern_ids.insert(patterns[0].clone(), 0);
    // state: (node, pattern id) -> walk count
    let mut frontier: HashMap<(NodeIdx, usize), u64> = HashMap::from([((s, 0), 1)]);
    let mut out = Vec::with_capacity(max_hop);
    for hop in 1..=max_hop {
        let mut next: HashMap<(NodeIdx, usize), u64> = HashMap::with_capacity(frontier.len() * 2);
        // child pattern ids are memoized per (parent pattern, type)
        let mut child: HashMap<(usize, TypeIdx), usize> = HashMap::new();
        for (&(v, pid), &count) in &frontier {
            for &n in g.neighbors(v) {
                let t = g.node_type(n);
                let cid = *child.entry((pid, t)).or_insert_with(|| {
                    let mut p = patterns[pid].clone();
                    p.push(t);
                    *pattern_ids.entry(p.clone()).or_insert_with(|| {
                        patterns.push(p);
                        patterns.len() - 1
                    })
                });
                *next.entry((n, cid)).or_default() += count;
            }
        }
        let mut counts: BTreeMap<Pattern, u64> = BTreeMap::new();
        let mut neighborhoods: BTreeMap<TypeIdx, BTreeSet<NodeIdx>> = BTreeMap::new();
        let mut total: u64 = 0;
        for (&(v, pid), &c) in &next {
            if v == s {
                continue;
            }
            total = total.saturating_add(c);
            *counts.entry(patterns[pid].clone()).or_default() += c;
            neighborhoods.entry(g.node_type(v)).or_default().insert(v);
        }
        if total > max_walks {
            return Err(Error::WalkCap { node: g.node_id(s).to_string(), hop, cap: max_walks });
        }
        out.push(HopSummary {
            profile: MetaPathProfile::from_counts(s, hop, counts),
            neighborhoods,
        });
        frontier = next;
    }
    Ok(out)
}

/// Node sets reachable by walks of exactly 1..=hop edges (index `i - 1`);
/// the target itself is included where a walk returns to it.
fn reach_sets(g: &HeteroGraph, s: NodeIdx, hop: usize) -> Vec<BTreeSet<NodeIdx>> {
    let mut cur = BTreeSet::from([s]);
    let mut out = Vec::with_capacity(hop);
    for _ in 0..hop {
        let next: BTreeSet<NodeIdx> = cur.iter().flat_map(|&v| g.neighbors(v).iter().copied()).collect();
        out.push(next.clone());
        cur = next;
    }
    out
}

/// Number of simple paths (no repeated node) with exactly `hop` edges from
/// `s`. This is the per-pair relation count a tokenizer without type pooling
/// would have to encode.
pub fn count_simple_paths(g: &HeteroGraph, s: NodeIdx, hop: usize, max_paths: u64) -> Result<u64> {
    check_node(g, s)?;
    let mut visited = vec![false; g.num_nodes()];
    visited[s] = true;
    let mut count = 0u64;
    simple_dfs(g, s, hop, &mut visited, &mut count, max_paths)
        .map_err(|()| Error::WalkCap { node: g.node_id(s).to_string(), hop, cap: max_paths })?;
    Ok(count)
}

fn simple_dfs(
    g: &HeteroGraph,
    v: NodeIdx,
    remaining: usize,
    visited: &mut [bool],
    count: &mut u64,
    cap: u64,
) -> std::result::Result<(), ()> {
    if remaining == 0 {
        *count += 1;
        return if *count > cap { Err(()) } else { Ok(()) };
    }
    for &n in g.neighbors(v) {
        if !visited[n] {
            visited[n] = true;
            simple_dfs(g, n, remaining - 1, visited, count, cap)?;
            visited[n] = false;
        }
    }
    Ok(())
}

/// Render a pattern as `type-type-...` using schema names.
pub fn pattern_string(g: &HeteroGraph, p: &[TypeIdx]) -> String {
    p.iter()
        .map(|&t| g.schema().type_name(t))
        .collect::<Vec<_>>()
        .join("-")
}

/// CSV dump with one row per (target, hop, pattern).
pub fn write_profile_csv<W: Write>(
    w: W,
    g: &HeteroGraph,
    profiles: &[MetaPathProfile],
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["target", "hop", "pattern", "count", "proportion"])?;
    for p in profiles {
        for (pat, st) in &p.patterns {
            out.write_record([
                g.node_id(p.target).to_string(),
                p.hop.to_string(),
                pattern_string(g, pat),
                st.count.to_string(),
                format!("{}", st.proportion),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

fn check_node(g: &HeteroGraph, s: NodeIdx) -> Result<()> {
    if g.contains_node(s) {
        Ok(())
    } else {
        Err(Error::UnknownNode(format!("#{s}")))
    }
}

fn check_hop(hop: usize) -> Result<()> {
    if hop == 0 {
        Err(Error::Config("hop must be at least 1".into()))
    } else {
        Ok(())
    }
}
