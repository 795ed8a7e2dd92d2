use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Encoder;
use crate::error::{Error, Result};
use crate::graph::{HeteroGraph, NodeIdx, TypeIdx};
use crate::pathstats::{hop_profiles, HopSummary, HopTypeNeighborhood, DEFAULT_MAX_WALKS};
use crate::prompt::{bind_placeholders, build_relation_prompt, PromptInstance, TemplateId};
use crate::tensor::{read_container, write_container, Tensor};

/// Node tokens and per-(target, hop, type) relation tokens for one prompt
/// template.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTable {
    pub dim: usize,
    pub template: TemplateId,
    pub hops: usize,
    pub node_tokens: BTreeMap<NodeIdx, Vec<f64>>,
    pub relation_tokens: BTreeMap<(NodeIdx, usize, TypeIdx), Vec<f64>>,
    /// Endpoint types with a relation token, for every tokenized target and
    /// hop (empty when the hop has no endpoints).
    pub hop_types: BTreeMap<(NodeIdx, usize), Vec<TypeIdx>>,
    pub call_count: u64,
    pub cache_hits: u64,
    pub stats: TokenizeStats,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenizeStats {
    /// Backend calls spent on node text.
    pub node_calls: u64,
    /// Backend calls spent on relation prompts, per target.
    pub relation_calls: BTreeMap<NodeIdx, u64>,
}

impl TokenTable {
    pub fn new(dim: usize, template: TemplateId, hops: usize) -> Self {
        Self {
            dim,
            template,
            hops,
            node_tokens: BTreeMap::new(),
            relation_tokens: BTreeMap::new(),
            hop_types: BTreeMap::new(),
            call_count: 0,
            cache_hits: 0,
            stats: TokenizeStats::default(),
        }
    }

    pub fn node_token(&self, v: NodeIdx) -> Option<&[f64]> {
        self.node_tokens.get(&v).map(Vec::as_slice)
    }

    pub fn relation_token(&self, s: NodeIdx, hop: usize, t: TypeIdx) -> Option<&[f64]> {
        self.relation_tokens.get(&(s, hop, t)).map(Vec::as_slice)
    }

    pub fn targets(&self) -> BTreeSet<NodeIdx> {
        self.hop_types.keys().map(|(s, _)| *s).collect()
    }

    pub fn is_target(&self, s: NodeIdx) -> bool {
        self.hop_types.contains_key(&(s, 1))
    }

    /// Relation tokens stored for `s` across all hops.
    pub fn relation_count(&self, s: NodeIdx) -> usize {
        self.relation_tokens
            .range((s, 0, 0)..(s + 1, 0, 0))
            .count()
    }

    /// Vectors kept for target `s`: its own token plus its relation tokens.
    pub fn stored_vectors(&self, s: NodeIdx) -> usize {
        usize::from(self.node_tokens.contains_key(&s)) + self.relation_count(s)
    }

    pub fn save(&self, g: &HeteroGraph, path: &Path) -> Result<()> {
        let meta = TableMeta {
            dim: self.dim,
            template: self.template,
            hops: self.hops,
            call_count: self.call_count,
            cache_hits: self.cache_hits,
            nodes: self.node_tokens.keys().map(|&v| g.node_id(v).to_string()).collect(),
            relations: self
                .relation_tokens
                .keys()
                .map(|&(s, h, t)| (g.node_id(s).to_string(), h, g.schema().type_name(t).to_string()))
                .collect(),
            hop_types: self
                .hop_types
                .iter()
                .map(|(&(s, h), ts)| {
                    (
                        g.node_id(s).to_string(),
                        h,
                        ts.iter().map(|&t| g.schema().type_name(t).to_string()).collect(),
                    )
                })
                .collect(),
        };
        let tensors: Vec<(String, Tensor)> = self
            .node_tokens
            .values()
            .chain(self.relation_tokens.values())
            .enumerate()
            .map(|(i, v)| (i.to_string(), Tensor::row(v.clone())))
            .collect();
        write_container(path, &serde_json::to_string(&meta)?, &tensors)
    }

    pub fn load(g: &HeteroGraph, path: &Path) -> Result<Self> {
        let (meta, tensors) = read_container(path)?;
        let meta: TableMeta = serde_json::from_str(&meta)?;
        if tensors.len() != meta.nodes.len() + meta.relations.len() {
            return Err(Error::Checkpoint(format!(
                "token table lists {} keys but holds {} vectors",
                meta.nodes.len() + meta.relations.len(),
                tensors.len()
            )));
        }
        let ty = |name: &str| {
            g.schema()
                .node_type(name)
                .ok_or_else(|| Error::UnknownNodeType(name.to_string()))
        };
        let mut table = TokenTable::new(meta.dim, meta.template, meta.hops);
        table.call_count = meta.call_count;
        table.cache_hits = meta.cache_hits;
        let mut it = tensors.into_iter().map(|(_, t)| t.into_data());
        for id in &meta.nodes {
            table.node_tokens.insert(g.node_index(id)?, it.next().unwrap());
        }
        for (id, h, t) in &meta.relations {
            table
                .relation_tokens
                .insert((g.node_index(id)?, *h, ty(t)?), it.next().unwrap());
        }
        for (id, h, ts) in &meta.hop_types {
            let ts = ts.iter().map(|t| ty(t)).collect::<Result<Vec<_>>>()?;
            table.hop_types.insert((g.node_index(id)?, *h), ts);
        }
        Ok(table)
    }
}

#[derive(Serialize, Deserialize)]
struct TableMeta {
    dim: usize,
    template: TemplateId,
    hops: usize,
    call_count: u64,
    cache_hits: u64,
    nodes: Vec<String>,
    relations: Vec<(String, usize, String)>,
    hop_types: Vec<(String, usize, Vec<String>)>,
}

fn mean_of<'a>(vs: impl Iterator<Item = &'a [f64]>, dim: usize) -> (Vec<f64>, usize) {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for v in vs {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    (acc, n)
}

/// Mean of the node tokens of `t`'s text-bearing neighbors. Makes no
/// backend call.
pub fn pooled_node_token(g: &HeteroGraph, t: NodeIdx, table: &TokenTable) -> Result<Vec<f64>> {
    if !g.contains_node(t) {
        return Err(Error::UnknownNode(format!("#{t}")));
    }
    let texted: Vec<NodeIdx> = g
        .neighbors(t)
        .iter()
        .copied()
        .filter(|&n| g.node_text(n).is_some_and(|s| !s.is_empty()))
        .collect();
    if texted.is_empty() {
        return Err(Error::NoTextNeighbor(g.node_id(t).to_string()));
    }
    let tokens = texted
        .iter()
        .map(|&n| {
            table
                .node_token(n)
                .ok_or_else(|| Error::MissingToken(format!("node token of `{}`", g.node_id(n))))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_of(tokens.into_iter(), table.dim).0)
}

/// Relation token for target `s` against the pooled token of `nb`.
///
/// Pools the member node tokens (zero vector when `nb` is empty), binds
/// `(u_s, pooled)` to `prompt`, and encodes it: one backend call at most,
/// independent of the neighborhood size. The result is stored in `table`.
/// Returns the token and whether the backend was called.
#[allow(clippy::too_many_arguments)]
pub fn relation_token(
    encoder: &Encoder,
    g: &HeteroGraph,
    s: NodeIdx,
    hop: usize,
    t: TypeIdx,
    table: &mut TokenTable,
    nb: &HopTypeNeighborhood,
    prompt: &PromptInstance,
) -> Result<(Vec<f64>, bool)> {
    let (v, called) = compute_relation_token(encoder, g, s, table, nb, prompt)?;
    table.relation_tokens.insert((s, hop, t), v.clone());
    Ok((v, called))
}

fn compute_relation_token(
    encoder: &Encoder,
    g: &HeteroGraph,
    s: NodeIdx,
    table: &TokenTable,
    nb: &HopTypeNeighborhood,
    prompt: &PromptInstance,
) -> Result<(Vec<f64>, bool)> {
    let missing = |v: NodeIdx| Error::MissingToken(format!("node token of `{}`", g.node_id(v)));
    let u_s = table.node_token(s).ok_or_else(|| missing(s))?.to_vec();
    let members = nb
        .members
        .iter()
        .map(|&m| table.node_token(m).ok_or_else(|| missing(m)))
        .collect::<Result<Vec<_>>>()?;
    let (pooled, _) = mean_of(members.into_iter(), table.dim);
    let bound = bind_placeholders(prompt.clone(), vec![u_s, pooled], table.dim)?;
    let (v, called) = encoder.encode_prompt(&bound)?;
    Ok((v.to_vec(), called))
}

#[derive(Debug, Clone)]
pub struct TokenizeConfig {
    pub hops: usize,
    pub template: TemplateId,
    pub max_walks: u64,
    /// Worker threads for per-target work; 1 runs inline.
    pub workers: usize,
}

impl TokenizeConfig {
    pub fn new(hops: usize, template: TemplateId) -> Self {
        Self { hops, template, max_walks: DEFAULT_MAX_WALKS, workers: 1 }
    }
}

/// Tokenize `targets`: node tokens for every node involved (text encodings,
/// or neighbor pooling for textless nodes) and one relation token per
/// (target, hop, endpoint type present at that hop).
pub fn tokenize_graph(
    encoder: &Encoder,
    g: &HeteroGraph,
    targets: &[NodeIdx],
    cfg: &TokenizeConfig,
) -> Result<TokenTable> {
    tokenize_graph_with_nodes(encoder, g, targets, cfg, BTreeMap::new())
}

/// As [`tokenize_graph`], with node tokens supplied up front for some
/// nodes; those are used as-is and never encoded.
pub fn tokenize_graph_with_nodes(
    encoder: &Encoder,
    g: &HeteroGraph,
    targets: &[NodeIdx],
    cfg: &TokenizeConfig,
    preset: BTreeMap<NodeIdx, Vec<f64>>,
) -> Result<TokenTable> {
    if cfg.hops == 0 {
        return Err(Error::Config("tokenization needs at least one hop".into()));
    }
    let dim = encoder.dim();
    if let Some((v, t)) = preset.iter().find(|(_, t)| t.len() != dim) {
        return Err(Error::Config(format!(
            "preset token for `{}` has dimension {}, encoder has {dim}",
            g.node_id(*v),
            t.len()
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| tokenize_inner(encoder, g, targets, cfg, preset))
}

fn tokenize_inner(
    encoder: &Encoder,
    g: &HeteroGraph,
    targets: &[NodeIdx],
    cfg: &TokenizeConfig,
    preset: BTreeMap<NodeIdx, Vec<f64>>,
) -> Result<TokenTable> {
    let calls0 = encoder.call_count();
    let hits0 = encoder.cache_hits();
    let mut table = TokenTable::new(encoder.dim(), cfg.template, cfg.hops);
    table.node_tokens = preset;

    let mut targets = targets.to_vec();
    targets.sort_unstable();
    targets.dedup();

    let summaries: Vec<Vec<HopSummary>> = targets
        .par_iter()
        .map(|&s| hop_profiles(g, s, cfg.hops, cfg.max_walks))
        .collect::<Result<_>>()?;

    // Node tokens: targets and every pooled neighbor.
    let mut needed: BTreeSet<NodeIdx> = targets.iter().copied().collect();
    for hops in &summaries {
        for h in hops {
            for members in h.neighborhoods.values() {
                needed.extend(members);
            }
        }
    }
    needed.retain(|v| !table.node_tokens.contains_key(v));
    let has_text = |v: NodeIdx| g.node_text(v).is_some_and(|t| !t.is_empty());
    let mut to_encode: BTreeSet<NodeIdx> = BTreeSet::new();
    let mut to_pool: Vec<NodeIdx> = Vec::new();
    for &v in &needed {
        if has_text(v) {
            to_encode.insert(v);
        } else {
            to_pool.push(v);
            to_encode.extend(g.neighbors(v).iter().copied().filter(|&n| has_text(n)));
        }
    }
    to_encode.retain(|v| !table.node_tokens.contains_key(v));
    let to_encode: Vec<NodeIdx> = to_encode.into_iter().collect();
    let encoded: Vec<(Arc<[f64]>, bool)> = to_encode
        .par_iter()
        .map(|&v| encoder.encode_text(g.node_text(v).expect("filtered on text")))
        .collect::<Result<_>>()?;
    for (&v, (tok, called)) in to_encode.iter().zip(encoded) {
        table.stats.node_calls += u64::from(called);
        table.node_tokens.insert(v, tok.to_vec());
    }
    for v in to_pool {
        let tok = pooled_node_token(g, v, &table)?;
        table.node_tokens.insert(v, tok);
    }

    // Relation tokens, one per (target, hop, type present).
    type TargetTokens = (Vec<((usize, TypeIdx), Vec<f64>)>, Vec<(usize, Vec<TypeIdx>)>, u64);
    let per_target: Vec<TargetTokens> = targets
        .par_iter()
        .zip(summaries.par_iter())
        .map(|(&s, hops)| {
            let mut tokens = Vec::new();
            let mut present = Vec::new();
            let mut calls = 0u64;
            for h in hops {
                let types: Vec<TypeIdx> = h.types_present().collect();
                for &t in &types {
                    let prompt = build_relation_prompt(
                        g.schema(),
                        g.node_type(s),
                        t,
                        h.profile.hop,
                        &h.profile.restricted_to(t),
                        cfg.template,
                    )?;
                    let nb = h.neighborhood(t);
                    let (v, called) = compute_relation_token(encoder, g, s, &table, &nb, &prompt)?;
                    calls += u64::from(called);
                    tokens.push(((h.profile.hop, t), v));
                }
                present.push((h.profile.hop, types));
            }
            Ok((tokens, present, calls))
        })
        .collect::<Result<_>>()?;
    for (&s, (tokens, present, calls)) in targets.iter().zip(per_target) {
        for ((hop, t), v) in tokens {
            table.relation_tokens.insert((s, hop, t), v);
        }
        for (hop, types) in present {
            table.hop_types.insert((s, hop), types);
        }
        table.stats.relation_calls.insert(s, calls);
    }
    table.call_count = encoder.call_count() - calls0;
    table.cache_hits = encoder.cache_hits() - hits0;
    Ok(table)
}
