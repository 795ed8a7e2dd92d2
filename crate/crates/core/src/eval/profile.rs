use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::encoder::{tokenize_graph, Encoder, TokenTable, TokenizeConfig};
use crate::error::Result;
use crate::graph::{HeteroGraph, NodeIdx};
use crate::pathstats::{count_simple_paths, hop_profiles};

/// Per-target cost of type-pooled tokenization next to a per-path baseline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetProfile {
    pub target: NodeIdx,
    pub node_id: String,
    pub node_type: String,
    /// Node types present at each hop `1..=K`.
    pub types_per_hop: Vec<usize>,
    /// Relation tokens produced (one per hop and type present).
    pub relation_tokens: usize,
    /// Backend calls made for those tokens; cache hits are free.
    pub relation_calls: u64,
    /// Simple paths with `1..=K` edges: one encoding each without pooling.
    pub naive_paths: u64,
    /// Walks with `1..=K` edges.
    pub naive_walks: u64,
    /// Vectors kept for the target: its node token plus relation tokens.
    pub stored_vectors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyReport {
    pub hops: usize,
    pub num_node_types: usize,
    pub backend: String,
    pub targets: Vec<TargetProfile>,
    pub node_calls: u64,
    pub total_calls: u64,
    pub cache_hits: u64,
    /// Every encoding came from the cache.
    pub cache_complete: bool,
    pub phases: Vec<PhaseTiming>,
}

impl EfficiencyReport {
    /// Upper bound `|types| * K` on relation tokens per target.
    pub fn relation_bound(&self) -> usize {
        self.num_node_types * self.hops
    }

    pub fn mean_stored_vectors(&self) -> f64 {
        if self.targets.is_empty() {
            return 0.0;
        }
        self.targets.iter().map(|t| t.stored_vectors as f64).sum::<f64>() / self.targets.len() as f64
    }

    /// One row per target.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "target",
            "node_type",
            "hops",
            "relation_tokens",
            "relation_calls",
            "naive_paths",
            "naive_walks",
            "stored_vectors",
            "relation_bound",
            "cache_complete",
        ])?;
        for t in &self.targets {
            out.write_record([
                t.node_id.clone(),
                t.node_type.clone(),
                self.hops.to_string(),
                t.relation_tokens.to_string(),
                t.relation_calls.to_string(),
                t.naive_paths.to_string(),
                t.naive_walks.to_string(),
                t.stored_vectors.to_string(),
                self.relation_bound().to_string(),
                self.cache_complete.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Tokenize `targets` with instrumentation and count the per-path baseline
/// without calling the backend for it.
pub fn profile_run(
    encoder: &Encoder,
    g: &HeteroGraph,
    targets: &[NodeIdx],
    cfg: &TokenizeConfig,
) -> Result<(EfficiencyReport, TokenTable)> {
    let mut targets = targets.to_vec();
    targets.sort_unstable();
    targets.dedup();

    let started = Instant::now();
    let mut baseline = Vec::with_capacity(targets.len());
    for &s in &targets {
        let mut paths = 0u64;
        for hop in 1..=cfg.hops {
            paths += count_simple_paths(g, s, hop, cfg.max_walks)?;
        }
        let walks: u64 = hop_profiles(g, s, cfg.hops, cfg.max_walks)?
            .iter()
            .map(|h| h.profile.total_walks())
            .sum();
        baseline.push((paths, walks));
    }
    let baseline_secs = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let table = tokenize_graph(encoder, g, &targets, cfg)?;
    let tokenize_secs = started.elapsed().as_secs_f64();

    let rows = targets
        .iter()
        .zip(baseline)
        .map(|(&s, (naive_paths, naive_walks))| TargetProfile {
            target: s,
            node_id: g.node_id(s).to_string(),
            node_type: g.node_type_name(s).to_string(),
            types_per_hop: (1..=cfg.hops)
                .map(|h| table.hop_types.get(&(s, h)).map_or(0, Vec::len))
                .collect(),
            relation_tokens: table.relation_count(s),
            relation_calls: table.stats.relation_calls.get(&s).copied().unwrap_or(0),
            naive_paths,
            naive_walks,
            stored_vectors: table.stored_vectors(s),
        })
        .collect();
    let report = EfficiencyReport {
        hops: cfg.hops,
        num_node_types: g.num_node_types(),
        backend: encoder.backend_name().to_string(),
        targets: rows,
        node_calls: table.stats.node_calls,
        total_calls: table.call_count,
        cache_hits: table.cache_hits,
        cache_complete: table.call_count == 0,
        phases: vec![
            PhaseTiming { phase: "baseline_counts".into(), seconds: baseline_secs },
            PhaseTiming { phase: "tokenize".into(), seconds: tokenize_secs },
        ],
    };
    if report.cache_complete {
        log::info!("cache-complete: no backend calls were made");
    }
    Ok((report, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EmbeddingCache, MockBackend};
    use crate::prompt::TemplateId;
    use crate::synth::complete_typed_tree;
    use std::sync::Arc;

    fn encoder(cache: Arc<EmbeddingCache>) -> Encoder {
        Encoder::new(Arc::new(MockBackend::new(4)), cache)
    }

    #[test]
    fn tree_root_counts() {
        let g = complete_typed_tree(5, 3).unwrap();
        let enc = encoder(Arc::new(EmbeddingCache::in_memory()));
        let (r, _) = profile_run(&enc, &g, &[0], &TokenizeConfig::new(3, TemplateId::PretrainLink)).unwrap();
        let t = &r.targets[0];
        assert_eq!(t.naive_paths, 5 + 25 + 125);
        assert!(t.relation_calls as usize <= r.relation_bound());
        assert!(t.naive_walks >= t.relation_calls);
        assert_eq!(t.stored_vectors, 1 + t.relation_tokens);
        assert!(!r.cache_complete);
    }

    #[test]
    fn warm_cache_is_complete() {
        let g = complete_typed_tree(3, 2).unwrap();
        let cache = Arc::new(EmbeddingCache::in_memory());
        let cfg = TokenizeConfig::new(2, TemplateId::PretrainLink);
        let (cold, _) = profile_run(&encoder(cache.clone()), &g, &[0, 1], &cfg).unwrap();
        assert!(cold.total_calls > 0);
        let (warm, _) = profile_run(&encoder(cache), &g, &[0, 1], &cfg).unwrap();
        assert_eq!(warm.total_calls, 0);
        assert!(warm.cache_complete);
        let mut buf = Vec::new();
        warm.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().ends_with(",true"));
    }
}
