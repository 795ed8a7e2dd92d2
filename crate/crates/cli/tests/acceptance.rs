//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits nonzero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, ensure, Context, Result};
use hetrel_core::encoder::{
    tokenize_graph, tokenize_graph_with_nodes, EmbeddingCache, Encoder, MockBackend, TokenizeConfig,
};
use hetrel_core::eval::{
    auc, average_precision, build_splits, fit_line, link_split, node_split, profile_run, NodeLabels, SplitSpec, Task,
};
use hetrel_core::graph::{EdgeTypeDef, GraphBuilder, HeteroGraph, NodeIdx, SchemaDef};
use hetrel_core::model::{embed_nodes, forward, AttentionCapture, Batch, ModelConfig, ModelParams};
use hetrel_core::pathstats::{hop_profiles, hop_type_neighbors, meta_path_profile, DEFAULT_MAX_WALKS};
use hetrel_core::prompt::{build_relation_prompt, TemplateId};
use hetrel_core::synth::{class_correlated_tokens, complete_typed_tree, synth_generate, SynthConfig, SynthEdgeType, SynthNodeType};
use hetrel_core::tensor::{grad_check, Tape};
use hetrel_core::train::{
    classification_loss_var, finetune, pair_logits, pretrain, pretrain_loss_var, sample_edges, similarity,
    FinetuneConfig, Pair, PretrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

type Criterion = (&'static str, fn() -> Result<String>);

fn main() {
    let criteria: [Criterion; 12] = [
        ("gradient check of the composed pipeline", gradient_check),
        ("softmax, alpha and gamma normalization", normalization),
        ("path statistics match an exhaustive oracle", path_oracle),
        ("relation-token calls linear in hops", linear_calls),
        ("stored vectors linear in hops", stored_vectors),
        ("node classification on the planted fixture", node_task),
        ("link prediction on the planted fixture", link_task),
        ("split protocol counts", split_counts),
        ("similarity symmetry", similarity_symmetry),
        ("frozen backbone after fine-tuning", frozen_backbone),
        ("deterministic pre-training and warm cache", determinism),
        ("prompt golden files", prompt_golden),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(anyhow!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail}) [{secs:.1}s]", i + 1),
            Err(e) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({e:#}) [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- fixtures

fn encoder(dim: usize) -> Encoder {
    Encoder::new(Arc::new(MockBackend::new(dim)), Arc::new(EmbeddingCache::in_memory()))
}

/// Random schema with 2 to 4 node types and a random set of edge types,
/// and up to `max_nodes` nodes, all with text.
fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize) -> HeteroGraph {
    let k = rng.gen_range(2..=4);
    let node_types: Vec<String> = (0..k).map(|i| format!("t{i}")).collect();
    let mut edge_types = Vec::new();
    for a in 0..k {
        for b in a..k {
            if rng.gen_bool(0.6) {
                edge_types.push(EdgeTypeDef { name: format!("e{a}{b}"), src: node_types[a].clone(), dst: node_types[b].clone() });
            }
        }
    }
    if edge_types.is_empty() {
        edge_types.push(EdgeTypeDef { name: "e01".into(), src: node_types[0].clone(), dst: node_types[1].clone() });
    }
    let schema = SchemaDef {
        node_types: node_types.clone(),
        edge_types: edge_types.clone(),
        domain_blurb: "a random network".into(),
        class_labels: BTreeMap::new(),
        label_noun: None,
    };
    let mut b = GraphBuilder::new(schema).unwrap();
    let n = rng.gen_range(2..=max_nodes);
    let mut by_type: Vec<Vec<String>> = vec![Vec::new(); k];
    for i in 0..n {
        let t = rng.gen_range(0..k);
        let id = format!("v{i}");
        b.add_node(&id, &node_types[t], Some(&id)).unwrap();
        by_type[t].push(id);
    }
    let attempts = rng.gen_range(0..=2 * n);
    for _ in 0..attempts {
        let e = &edge_types[rng.gen_range(0..edge_types.len())];
        let (s, d) = (&by_type[node_types.iter().position(|t| *t == e.src).unwrap()], &by_type[node_types.iter().position(|t| *t == e.dst).unwrap()]);
        if s.is_empty() || d.is_empty() {
            continue;
        }
        let (x, y) = (&s[rng.gen_range(0..s.len())], &d[rng.gen_range(0..d.len())]);
        b.add_edge(x, y, &e.name).unwrap();
    }
    b.build()
}

/// Six nodes of types a, b, c with every type pair connected.
fn six_node_graph() -> HeteroGraph {
    let t = |n: &str, s: &str, d: &str| EdgeTypeDef { name: n.into(), src: s.into(), dst: d.into() };
    let schema = SchemaDef {
        node_types: vec!["a".into(), "b".into(), "c".into()],
        edge_types: vec![t("ab", "a", "b"), t("bc", "b", "c"), t("ca", "c", "a")],
        domain_blurb: "a toy network".into(),
        class_labels: BTreeMap::from([("b".to_string(), vec!["x".into(), "y".into(), "z".into()])]),
        label_noun: None,
    };
    let mut gb = GraphBuilder::new(schema).unwrap();
    for (id, ty) in [("a0", "a"), ("a1", "a"), ("b0", "b"), ("b1", "b"), ("c0", "c"), ("c1", "c")] {
        gb.add_node(id, ty, Some(id)).unwrap();
    }
    for (x, y, e) in [("a0", "b0", "ab"), ("a1", "b1", "ab"), ("b0", "c0", "bc"), ("b1", "c1", "bc"), ("b0", "c1", "bc"), ("c0", "a1", "ca")] {
        gb.add_edge(x, y, e).unwrap();
    }
    gb.build()
}

fn bipartite(classes: usize, per_class: usize, p_intra: f64, p_inter: f64) -> SynthConfig {
    SynthConfig {
        node_types: vec![
            SynthNodeType { name: "paper".into(), count: classes * per_class, with_text: true },
            SynthNodeType { name: "author".into(), count: classes * per_class, with_text: true },
        ],
        edge_types: vec![SynthEdgeType { name: "writes".into(), src: "author".into(), dst: "paper".into(), p_intra, p_inter }],
        classes,
        domain_blurb: "an academic network".into(),
        labeled_types: vec!["paper".into()],
    }
}

fn model_config() -> ModelConfig {
    ModelConfig { d: 32, heads: 4, type_layers: 2, hop_layers: 3, hops: 2, d_llm: 32 }
}

fn preset_tokens(labels: &[usize], dim: usize, seed: u64) -> BTreeMap<NodeIdx, Vec<f64>> {
    class_correlated_tokens(labels, dim, 0.5, seed).into_iter().enumerate().collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt3(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

// ---------------------------------------------------------------- 1

fn gradient_check() -> Result<String> {
    let started = Instant::now();
    let g = six_node_graph();
    let enc = encoder(6);
    let nodes: Vec<NodeIdx> = (0..6).collect();
    let table = tokenize_graph(&enc, &g, &nodes, &TokenizeConfig::new(2, TemplateId::PretrainLink))?;
    let cfg = ModelConfig { d: 8, heads: 2, type_layers: 2, hop_layers: 3, hops: 2, d_llm: 6 };
    let mut params = ModelParams::init(cfg.clone(), g.schema(), 11)?;
    params.add_head("b", &["x".into(), "y".into(), "z".into()], 12)?;
    ensure!(params.store.numel() >= 100, "only {} parameters", params.store.numel());
    let batch = Batch::from_table(&g, &table, &nodes, 2)?;
    let samples = sample_edges(&g, 1, 2)?;
    let (pairs, labels): (Vec<Pair>, Vec<bool>) = samples.labeled_pairs().into_iter().unzip();
    let b_rows: Vec<usize> = nodes.iter().copied().filter(|&v| g.node_type_name(v) == "b").collect();
    let b_labels = vec![0usize, 2];

    let link = grad_check(
        &params.store,
        |t, v| {
            let out = forward(t, v, &cfg, &batch)?;
            let lg = pair_logits(t, v, &g, out.z, &nodes, &pairs)?;
            pretrain_loss_var(t, lg, &labels)
        },
        1e-5,
        150,
        1,
    )?;
    let class = grad_check(
        &params.store,
        |t, v| {
            let out = forward(t, v, &cfg, &batch)?;
            let zb = t.select_rows(out.z, &b_rows)?;
            let lg = hetrel_core::train::head_logits(t, v, zb, "b")?;
            classification_loss_var(t, lg, &b_labels)
        },
        1e-5,
        150,
        2,
    )?;
    let secs = started.elapsed().as_secs_f64();
    ensure!(link.checked >= 100 && class.checked >= 100, "too few coordinates checked");
    ensure!(link.max_rel_error < 1e-4, "link loss max rel error {:.2e} at {:?}", link.max_rel_error, link.worst);
    ensure!(class.max_rel_error < 1e-4, "classification loss max rel error {:.2e} at {:?}", class.max_rel_error, class.worst);
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!(
        "{} params, {}+{} coordinates, max rel error {:.1e} / {:.1e}",
        params.store.numel(),
        link.checked,
        class.checked,
        link.max_rel_error,
        class.max_rel_error
    ))
}

// ---------------------------------------------------------------- 2

fn normalization() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let enc = encoder(6);
    let mut passes = 0;
    let mut vectors = 0usize;
    let mut worst = 0f64;
    for _ in 0..50 {
        let g = random_graph(&mut rng, 20);
        let hops = rng.gen_range(1..=3);
        let nodes: Vec<NodeIdx> = (0..g.num_nodes()).collect();
        let table = tokenize_graph(&enc, &g, &nodes, &TokenizeConfig::new(hops, TemplateId::PretrainLink))?;
        let batch = Batch::from_table(&g, &table, &nodes, hops)?;
        for _ in 0..20 {
            let cfg = ModelConfig { d: 8, heads: 2, type_layers: 2, hop_layers: 3, hops, d_llm: 6 };
            let params = ModelParams::init(cfg.clone(), g.schema(), rng.gen())?;
            let mut tape = Tape::new();
            let vars = params.store.bind(&mut tape, |_| false);
            let out = forward(&mut tape, &vars, &cfg, &batch)?;
            for d in tape.distributions() {
                worst = worst.max((d.iter().sum::<f64>() - 1.0).abs());
                vectors += 1;
            }
            let cap = AttentionCapture::from_tape(&tape, &out, &batch);
            let mut alpha: BTreeMap<(NodeIdx, usize), f64> = BTreeMap::new();
            for &(s, hop, _, a) in &cap.alpha {
                *alpha.entry((s, hop)).or_default() += a;
            }
            let mut gamma: BTreeMap<NodeIdx, f64> = BTreeMap::new();
            for &(s, _, x) in &cap.gamma {
                *gamma.entry(s).or_default() += x;
            }
            for x in alpha.values().chain(gamma.values()) {
                worst = worst.max((x - 1.0).abs());
                vectors += 1;
            }
            passes += 1;
        }
    }
    ensure!(passes == 1000);
    ensure!(worst <= 1e-9, "largest deviation {worst:.2e}");
    Ok(format!("{passes} forward passes, {vectors} distributions, max |sum - 1| = {worst:.1e}"))
}

// ---------------------------------------------------------------- 3

/// Walks enumerated from the edge list, independent of the library's
/// adjacency and dynamic programming.
struct Oracle {
    adj: Vec<BTreeSet<NodeIdx>>,
}

impl Oracle {
    fn new(g: &HeteroGraph) -> Self {
        let mut adj = vec![BTreeSet::new(); g.num_nodes()];
        for e in g.edges() {
            adj[e.src].insert(e.dst);
            adj[e.dst].insert(e.src);
        }
        Self { adj }
    }

    fn walks(&self, s: NodeIdx, hop: usize) -> Vec<Vec<NodeIdx>> {
        let mut out = Vec::new();
        let mut stack = vec![vec![s]];
        while let Some(w) = stack.pop() {
            if w.len() == hop + 1 {
                if *w.last().unwrap() != s {
                    out.push(w);
                }
                continue;
            }
            for &n in &self.adj[*w.last().unwrap()] {
                let mut next = w.clone();
                next.push(n);
                stack.push(next);
            }
        }
        out
    }
}

fn path_oracle() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut compared = 0usize;
    for case in 0..50 {
        let g = random_graph(&mut rng, 40);
        let hops = rng.gen_range(1..=3);
        let oracle = Oracle::new(&g);
        for s in 0..g.num_nodes() {
            for hop in 1..=hops {
                let walks = oracle.walks(s, hop);
                let mut expected: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
                for w in &walks {
                    *expected.entry(w.iter().map(|&v| g.node_type(v)).collect()).or_default() += 1;
                }
                let profile = meta_path_profile(&g, s, hop, DEFAULT_MAX_WALKS)?;
                let got: BTreeMap<Vec<usize>, u64> = profile.patterns.iter().map(|(p, st)| (p.clone(), st.count)).collect();
                ensure!(got == expected, "graph {case}, node {s}, hop {hop}: counts {got:?} != {expected:?}");
                for (p, st) in &profile.patterns {
                    let end = *p.last().unwrap();
                    let total: u64 = expected.iter().filter(|(q, _)| q.last() == Some(&end)).map(|(_, c)| c).sum();
                    ensure!(st.proportion == st.count as f64 / total as f64, "graph {case}: proportion of {p:?}");
                }
                for t in 0..g.num_node_types() {
                    let want: BTreeSet<NodeIdx> =
                        walks.iter().map(|w| *w.last().unwrap()).filter(|&v| g.node_type(v) == t).collect();
                    let have = hop_type_neighbors(&g, s, hop, t)?.members;
                    ensure!(have == want, "graph {case}, node {s}, hop {hop}, type {t}: {have:?} != {want:?}");
                    compared += 1;
                }
            }
        }
    }
    Ok(format!("50 graphs, {compared} neighbor sets and their pattern counts equal"))
}

// ---------------------------------------------------------------- 4

struct ProfileRow {
    target: String,
    node_type: String,
    relation_calls: u64,
    naive_paths: u64,
    stored_vectors: u64,
    relation_bound: u64,
}

fn hetrel(args: &[&str]) -> Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hetrel"))
        .args(args)
        .env("RAYON_NUM_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .context("spawning hetrel")?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if !out.status.success() {
        bail!("hetrel {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    }
    Ok(stdout)
}

fn profile_via_cli(graph: &Path, hops: usize, out: &Path) -> Result<Vec<ProfileRow>> {
    hetrel(&[
        "profile",
        "--graph",
        graph.to_str().unwrap(),
        "--hops",
        &hops.to_string(),
        "--out",
        out.to_str().unwrap(),
    ])?;
    let mut r = csv::Reader::from_path(out)?;
    let h = r.headers()?.clone();
    let col = |name: &str| h.iter().position(|c| c == name).ok_or_else(|| anyhow!("missing column {name}"));
    let (ct, cty, cc, cn, cs, cb) = (
        col("target")?,
        col("node_type")?,
        col("relation_calls")?,
        col("naive_paths")?,
        col("stored_vectors")?,
        col("relation_bound")?,
    );
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(ProfileRow {
                target: rec[ct].to_string(),
                node_type: rec[cty].to_string(),
                relation_calls: rec[cc].parse()?,
                naive_paths: rec[cn].parse()?,
                stored_vectors: rec[cs].parse()?,
                relation_bound: rec[cb].parse()?,
            })
        })
        .collect()
}

fn linear_calls() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let types = 4u64;
    let mut summary = Vec::new();
    for k in 1..=3usize {
        let mut per_level: Vec<BTreeMap<String, BTreeSet<u64>>> = Vec::new();
        for b in [3usize, 5, 8] {
            let g = complete_typed_tree(b, 3)?;
            let gdir = dir.path().join(format!("tree{b}"));
            if !gdir.exists() {
                g.save_dir(&gdir)?;
            }
            let rows = profile_via_cli(&gdir, k, &dir.path().join(format!("profile_{b}_{k}.csv")))?;
            ensure!(rows.len() == g.num_nodes(), "profile covers {} of {} nodes", rows.len(), g.num_nodes());
            let mut levels: BTreeMap<String, BTreeSet<u64>> = BTreeMap::new();
            for r in &rows {
                ensure!(r.relation_bound == types * k as u64, "bound {} for K={k}", r.relation_bound);
                ensure!(
                    r.relation_calls <= types * k as u64,
                    "b={b}, K={k}: {} makes {} calls",
                    r.target,
                    r.relation_calls
                );
                ensure!(r.stored_vectors <= 1 + types * k as u64, "{}: {} stored vectors", r.target, r.stored_vectors);
                levels.entry(r.node_type.clone()).or_default().insert(r.relation_calls);
            }
            let root = rows.iter().find(|r| r.target == "n0").ok_or_else(|| anyhow!("no root row"))?;
            let expected: u64 = (1..=k as u32).map(|i| (b as u64).pow(i)).sum();
            ensure!(root.naive_paths == expected, "b={b}, K={k}: naive {} != {expected}", root.naive_paths);
            if b == 5 && k == 3 {
                summary.push(format!("root b=5 K=3: {} calls vs {} naive", root.relation_calls, root.naive_paths));
            }
            per_level.push(levels);
        }
        ensure!(
            per_level.windows(2).all(|w| w[0] == w[1]),
            "K={k}: per-level call counts change with b: {per_level:?}"
        );
    }
    Ok(summary.join(", "))
}

// ---------------------------------------------------------------- 5

fn academic_fixture(seed: u64) -> Result<HeteroGraph> {
    let cfg = SynthConfig {
        node_types: vec![
            SynthNodeType { name: "paper".into(), count: 90, with_text: true },
            SynthNodeType { name: "author".into(), count: 60, with_text: true },
            SynthNodeType { name: "organization".into(), count: 12, with_text: true },
        ],
        edge_types: vec![
            SynthEdgeType { name: "writes".into(), src: "author".into(), dst: "paper".into(), p_intra: 0.06, p_inter: 0.01 },
            SynthEdgeType { name: "cites".into(), src: "paper".into(), dst: "paper".into(), p_intra: 0.04, p_inter: 0.005 },
            SynthEdgeType { name: "belongs to".into(), src: "author".into(), dst: "organization".into(), p_intra: 0.15, p_inter: 0.02 },
        ],
        classes: 3,
        domain_blurb: "an academic network".into(),
        labeled_types: vec![],
    };
    Ok(synth_generate(&cfg, seed)?.0)
}

/// Mean stored vectors per target for K = 1, 2, 3, after checking every
/// target's count against its hop types and the `1 + |A|K` bound.
fn stored_means(g: &HeteroGraph) -> Result<Vec<f64>> {
    let types = g.num_node_types();
    let nodes: Vec<NodeIdx> = (0..g.num_nodes()).collect();
    let enc = encoder(8);
    let mut means = Vec::new();
    for k in 1..=3usize {
        let (report, table) = profile_run(&enc, g, &nodes, &TokenizeConfig::new(k, TemplateId::PretrainLink))?;
        for row in &report.targets {
            let present: usize = (1..=k).map(|h| table.hop_types.get(&(row.target, h)).map_or(0, Vec::len)).sum();
            ensure!(row.stored_vectors == 1 + present, "{}: {} stored, {} types present", row.node_id, row.stored_vectors, present);
            ensure!(row.stored_vectors <= 1 + types * k, "{}: {} > 1 + |A|K", row.node_id, row.stored_vectors);
        }
        means.push(report.mean_stored_vectors());
    }
    Ok(means)
}

/// Line fit over K = 1, 2, 3; returns the residual relative to the mean.
fn relative_residual(means: &[f64]) -> Result<f64> {
    let (_, _, rms) = fit_line(&[1.0, 2.0, 3.0], means)?;
    Ok(rms / mean(means))
}

fn stored_vectors() -> Result<String> {
    let mut parts = Vec::new();
    for (name, cfg) in [("node fixture", bipartite(3, 300, 0.02, 0.002)), ("link fixture", bipartite(10, 20, 0.25, 0.001))] {
        let means = stored_means(&synth_generate(&cfg, 0)?.0)?;
        let rel = relative_residual(&means)?;
        ensure!(rel < 0.01, "{name}: means {}, residual {:.2}% of the mean", fmt3(&means), 100.0 * rel);
        parts.push(format!("{name} {} ({:.2}%)", fmt3(&means), 100.0 * rel));
    }
    // Bound only: on this schema hop 1 reaches fewer types than later hops,
    // so the count is affine from hop 2 on rather than linear from hop 1.
    let means = stored_means(&academic_fixture(5)?)?;
    parts.push(format!("3-type academic {} ({:.2}%, bound only)", fmt3(&means), 100.0 * relative_residual(&means)?));
    Ok(parts.join(", "))
}

// ---------------------------------------------------------------- 6 and 10

struct NodeRun {
    micro: f64,
    macro_: f64,
    pretrained_hash: String,
    finetuned: ModelParams,
    pretrained: ModelParams,
    report_hashes: (String, String),
}

fn node_run(seed: u64) -> Result<NodeRun> {
    let cfg = bipartite(3, 300, 0.02, 0.002);
    let (g, labels) = synth_generate(&cfg, seed)?;
    let mc = model_config();
    let preset = preset_tokens(&labels, mc.d_llm, seed);
    let enc = encoder(mc.d_llm);
    let all: Vec<NodeIdx> = (0..g.num_nodes()).collect();
    let table = tokenize_graph_with_nodes(&enc, &g, &all, &TokenizeConfig::new(mc.hops, TemplateId::PretrainLink), preset.clone())?;
    let params = ModelParams::init(mc.clone(), g.schema(), seed)?;
    let pc = PretrainConfig { max_epochs: 10, ..Default::default() };
    let pre = pretrain(&g, &table, params, &pc, seed)?;

    let paper = g.schema().node_type("paper").unwrap();
    let papers = g.nodes_of_type(paper);
    let table_f = tokenize_graph_with_nodes(&enc, &g, papers, &TokenizeConfig::new(mc.hops, TemplateId::FinetuneClassify), preset)?;
    let lmap: BTreeMap<NodeIdx, usize> = papers.iter().map(|&v| (v, labels[v])).collect();
    let split = node_split(&NodeLabels::new(&g, "paper", lmap)?, seed)?;
    let ft = finetune(&g, &table_f, pre.params.clone(), &split, &FinetuneConfig::default(), seed)?;
    Ok(NodeRun {
        micro: ft.test_micro_f1,
        macro_: ft.test_macro_f1,
        pretrained_hash: pre.params.backbone_hash(),
        finetuned: ft.params,
        pretrained: pre.params,
        report_hashes: (ft.backbone_hash_before, ft.backbone_hash_after),
    })
}

fn node_runs() -> &'static Result<(Vec<NodeRun>, Duration), String> {
    static RUNS: std::sync::OnceLock<Result<(Vec<NodeRun>, Duration), String>> = std::sync::OnceLock::new();
    RUNS.get_or_init(|| {
        let started = Instant::now();
        let runs = SEEDS.iter().map(|&s| node_run(s)).collect::<Result<Vec<_>>>().map_err(|e| format!("{e:#}"))?;
        Ok((runs, started.elapsed()))
    })
}

fn node_task() -> Result<String> {
    let (runs, elapsed) = node_runs().as_ref().map_err(|e| anyhow!("{e}"))?;
    let micro: Vec<f64> = runs.iter().map(|r| r.micro).collect();
    let macro_: Vec<f64> = runs.iter().map(|r| r.macro_).collect();
    let detail = format!(
        "Micro-F1 {} (mean {:.3}), Macro-F1 {} (mean {:.3}), {:.0}s",
        fmt3(&micro),
        mean(&micro),
        fmt3(&macro_),
        mean(&macro_),
        elapsed.as_secs_f64()
    );
    ensure!(mean(&micro) >= 0.90 && mean(&macro_) >= 0.90, "{detail}");
    ensure!(elapsed.as_secs_f64() < 300.0, "{detail}");
    Ok(detail)
}

fn frozen_backbone() -> Result<String> {
    let (runs, _) = node_runs().as_ref().map_err(|e| anyhow!("{e}"))?;
    let dir = tempfile::tempdir()?;
    for (i, r) in runs.iter().enumerate() {
        let (before, after) = &r.report_hashes;
        ensure!(before == &r.pretrained_hash && after == &r.pretrained_hash, "seed {i}: report hashes differ");
        let pre = dir.path().join(format!("pre{i}.ckpt"));
        let fin = dir.path().join(format!("fin{i}.ckpt"));
        r.pretrained.save(&pre)?;
        r.finetuned.save(&fin)?;
        let (a, b) = (ModelParams::load(&pre)?, ModelParams::load(&fin)?);
        ensure!(a.backbone_hash() == b.backbone_hash(), "seed {i}: saved backbone hashes differ");
        ensure!(a.content_hash() != b.content_hash(), "seed {i}: fine-tuned checkpoint has no head");
    }
    Ok(format!("{} runs, backbone hash {}", runs.len(), &runs[0].pretrained_hash[..16]))
}

// ---------------------------------------------------------------- 7

fn link_run(seed: u64) -> Result<(f64, f64)> {
    let cfg = bipartite(10, 20, 0.25, 0.001);
    let (g, labels) = synth_generate(&cfg, seed)?;
    let mc = model_config();
    let preset = preset_tokens(&labels, mc.d_llm, seed);
    let split = link_split(&g, seed)?;
    let reduced = g.without_edges(&split.held_out_edges);
    let all: Vec<NodeIdx> = (0..g.num_nodes()).collect();
    let enc = encoder(mc.d_llm);
    let table =
        tokenize_graph_with_nodes(&enc, &reduced, &all, &TokenizeConfig::new(mc.hops, TemplateId::PretrainLink), preset)?;
    let params = ModelParams::init(mc, g.schema(), seed)?;
    let pc = PretrainConfig { max_epochs: 1000, ..Default::default() };
    let rep = pretrain(&reduced, &table, params, &pc, seed)?;
    let (z, _) = embed_nodes(&rep.params, &reduced, &table, &all, false)?;
    let labeled = split.test.labeled();
    let scores = labeled
        .iter()
        .map(|&((a, b), _)| similarity(&rep.params, z.row_slice(a), g.node_type_name(a), z.row_slice(b), g.node_type_name(b)))
        .collect::<hetrel_core::Result<Vec<f64>>>()?;
    let y: Vec<bool> = labeled.iter().map(|x| x.1).collect();
    Ok((auc(&scores, &y)?, average_precision(&scores, &y)?))
}

fn link_task() -> Result<String> {
    let started = Instant::now();
    let (aucs, aps): (Vec<f64>, Vec<f64>) = SEEDS.iter().map(|&s| link_run(s)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let secs = started.elapsed().as_secs_f64();
    let detail = format!("AUC {} (mean {:.3}), AP {} (mean {:.3}), {secs:.0}s", fmt3(&aucs), mean(&aucs), fmt3(&aps), mean(&aps));
    ensure!(mean(&aucs) >= 0.85 && mean(&aps) >= 0.75, "{detail}");
    ensure!(secs < 300.0, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn split_counts() -> Result<String> {
    // 100 authors x 100 papers, author i wrote paper j when 7i + 13j = 0 mod 10
    let t = |n: &str, s: &str, d: &str| EdgeTypeDef { name: n.into(), src: s.into(), dst: d.into() };
    let sizes = [250usize, 320, 430];
    let schema = SchemaDef {
        node_types: vec!["paper".into(), "author".into()],
        edge_types: vec![t("writes", "author", "paper")],
        domain_blurb: "an academic network".into(),
        class_labels: BTreeMap::from([("paper".to_string(), vec!["c0".into(), "c1".into(), "c2".into()])]),
        label_noun: None,
    };
    let mut b = GraphBuilder::new(schema)?;
    let total: usize = sizes.iter().sum();
    for j in 0..total {
        b.add_node(&format!("p{j}"), "paper", Some("paper"))?;
    }
    for i in 0..100 {
        b.add_node(&format!("a{i}"), "author", Some("author"))?;
    }
    for i in 0..100 {
        for j in 0..100 {
            if (7 * i + 13 * j) % 10 == 0 {
                b.add_edge(&format!("a{i}"), &format!("p{j}"), "writes")?;
            }
        }
    }
    let g = b.build();
    ensure!(g.num_edges() == 1000, "fixture has {} edges", g.num_edges());

    let mut labels = BTreeMap::new();
    let mut next = 0;
    for (c, &n) in sizes.iter().enumerate() {
        for _ in 0..n {
            labels.insert(g.node_index(&format!("p{next}"))?, c);
            next += 1;
        }
    }
    let nl = NodeLabels::new(&g, "paper", labels)?;
    let SplitSpec::Node(ns) = build_splits(&g, Some(&nl), Task::NodeClassification, 4)? else {
        bail!("node task gave a link split");
    };
    for (c, &n) in sizes.iter().enumerate() {
        let count = |part: &[(NodeIdx, usize)]| part.iter().filter(|x| x.1 == c).count();
        ensure!(
            (count(&ns.train), count(&ns.val), count(&ns.test)) == (100, 100, n - 200),
            "class {c}: {}/{}/{}",
            count(&ns.train),
            count(&ns.val),
            count(&ns.test)
        );
    }
    let mut seen: Vec<NodeIdx> = ns.train.iter().chain(&ns.val).chain(&ns.test).map(|x| x.0).collect();
    seen.sort_unstable();
    seen.dedup();
    ensure!(seen.len() == total, "node split overlaps or drops nodes");

    let SplitSpec::Link(ls) = build_splits(&g, None, Task::LinkPrediction, 4)? else {
        bail!("link task gave a node split");
    };
    let pos = [ls.train.positives.len(), ls.val.positives.len(), ls.test.positives.len()];
    let neg = [ls.train.negatives.len(), ls.val.negatives.len(), ls.test.negatives.len()];
    ensure!(pos == [640, 80, 80], "positives {pos:?}");
    ensure!(neg == [1280, 160, 160], "negatives {neg:?}");
    let edges: BTreeSet<Pair> = g.edges().iter().map(|e| (e.src.min(e.dst), e.src.max(e.dst))).collect();
    let mut negs: Vec<Pair> = [&ls.train, &ls.val, &ls.test]
        .iter()
        .flat_map(|p| p.negatives.iter().map(|&(a, b)| (a.min(b), a.max(b))))
        .collect();
    ensure!(negs.iter().all(|p| !edges.contains(p)), "a negative is an edge");
    let n = negs.len();
    negs.sort_unstable();
    negs.dedup();
    ensure!(negs.len() == n, "negatives repeat across parts");
    Ok(format!("nodes 100/100/{{50,120,230}}, positives {pos:?}, negatives {neg:?}"))
}

// ---------------------------------------------------------------- 9

fn similarity_symmetry() -> Result<String> {
    let g = six_node_graph();
    let cfg = ModelConfig { d: 16, heads: 2, type_layers: 1, hop_layers: 1, hops: 1, d_llm: 4 };
    let params = ModelParams::init(cfg, g.schema(), 9)?;
    let types = ["a", "b", "c"];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0f64;
    for _ in 0..10_000 {
        let scale = 10f64.powf(rng.gen_range(-2.0..1.0));
        let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-scale..scale)).collect();
        let y: Vec<f64> = (0..16).map(|_| rng.gen_range(-scale..scale)).collect();
        let (tx, ty) = (types[rng.gen_range(0..3)], types[rng.gen_range(0..3)]);
        let d = (similarity(&params, &x, tx, &y, ty)? - similarity(&params, &y, ty, &x, tx)?).abs();
        worst = worst.max(d);
    }
    ensure!(worst < 1e-12, "max asymmetry {worst:.2e}");
    Ok(format!("10000 pairs, max asymmetry {worst:.1e}"))
}

// ---------------------------------------------------------------- 11

fn determinism() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (g, _) = synth_generate(&bipartite(3, 15, 0.2, 0.02), 3)?;
    g.save_dir(Path::new(&p("graph")))?;
    let tokenize = || {
        hetrel(&[
            "tokenize", "--graph", &p("graph"), "--hops", "2", "--template", "pretrain", "--dim", "16", "--cache",
            &p("emb.cache"), "--out", &p("tokens.bin"),
        ])
    };
    let cold = tokenize()?;
    let warm = tokenize()?;
    let calls = |s: &str| -> Result<u64> {
        let line = s.lines().find(|l| l.starts_with("backend calls:")).ok_or_else(|| anyhow!("no call count in {s:?}"))?;
        Ok(line["backend calls:".len()..].trim().parse()?)
    };
    ensure!(calls(&cold)? > 0, "cold run made no calls");
    ensure!(calls(&warm)? == 0, "warm run made {} calls", calls(&warm)?);

    std::fs::write(
        p("run.toml"),
        "[model]\nd = 16\nheads = 2\ntype_layers = 1\nhop_layers = 2\n\n[pretrain]\nmax_epochs = 8\nlr = 0.001\n",
    )?;
    for out in ["a.ckpt", "b.ckpt"] {
        hetrel(&["pretrain", "--graph", &p("graph"), "--tokens", &p("tokens.bin"), "--config", &p("run.toml"), "--seed", "42", "--out", &p(out)])?;
    }
    let (a, b) = (std::fs::read(p("a.ckpt"))?, std::fs::read(p("b.ckpt"))?);
    ensure!(a == b, "checkpoints differ");
    Ok(format!("cold {} calls, warm 0; checkpoints identical ({} bytes)", calls(&cold)?, a.len()))
}

// ---------------------------------------------------------------- 12

fn academic_schema() -> SchemaDef {
    let edge = |name: &str, src: &str, dst: &str| EdgeTypeDef { name: name.into(), src: src.into(), dst: dst.into() };
    SchemaDef {
        node_types: vec!["paper".into(), "author".into(), "organization".into()],
        edge_types: vec![edge("writes", "author", "paper"), edge("cites", "paper", "paper"), edge("belongs to", "author", "organization")],
        domain_blurb: "an academic network".into(),
        class_labels: BTreeMap::from([(
            "author".to_string(),
            vec!["Database".into(), "Wireless Communication".into(), "Data Mining".into()],
        )]),
        label_noun: Some("research field".into()),
    }
}

fn academic_graph(nodes: &[(&str, &str)], edges: &[(&str, &str, &str)]) -> Result<HeteroGraph> {
    let mut b = GraphBuilder::new(academic_schema())?;
    for (id, t) in nodes {
        b.add_node(id, t, Some(id))?;
    }
    for (s, d, e) in edges {
        b.add_edge(s, d, e)?;
    }
    Ok(b.build())
}

fn render(g: &HeteroGraph, src: &str, dst_type: &str, hop: usize, template: TemplateId) -> Result<String> {
    let s = g.node_index(src)?;
    let dst = g.schema().node_type(dst_type).ok_or_else(|| anyhow!("no type {dst_type}"))?;
    let profiles = hop_profiles(g, s, hop, DEFAULT_MAX_WALKS)?;
    let profile = profiles[hop - 1].profile.restricted_to(dst);
    Ok(build_relation_prompt(g.schema(), g.node_type(s), dst, hop, &profile, template)?.rendered_text)
}

fn prompt_golden() -> Result<String> {
    let golden_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden");
    let citation = academic_graph(
        &[
            ("p0", "paper"),
            ("p1", "paper"),
            ("p2", "paper"),
            ("p3", "paper"),
            ("p4", "paper"),
            ("a0", "author"),
            ("a1", "author"),
            ("o0", "organization"),
        ],
        &[
            ("p0", "p1", "cites"),
            ("p1", "p3", "cites"),
            ("a0", "p0", "writes"),
            ("a0", "p2", "writes"),
            ("a0", "p4", "writes"),
            ("a1", "p1", "writes"),
            ("a0", "o0", "belongs to"),
        ],
    )?;
    let citation_free = academic_graph(
        &[("p0", "paper"), ("p1", "paper"), ("a0", "author"), ("a1", "author"), ("o0", "organization")],
        &[("a0", "p0", "writes"), ("a1", "p1", "writes"), ("a0", "o0", "belongs to")],
    )?;
    let link_steps = "Steps: 1. Analyze relations based on path proportions and connection types. 2. Calculate the similarity (0-1) with justification.";
    let classify_steps = "Steps: 1. Analyze relations based on path proportions and connection types. 2. Classify the first author's primary research field (Database, Wireless Communication, or Data Mining) with justification.";
    let cases = [
        ("hop1_paper_author", &citation, "p0", "author", 1, TemplateId::PretrainLink, "paper-author (proportion of paths: 1.00)", link_steps),
        ("hop2_paper_author", &citation, "p0", "author", 2, TemplateId::PretrainLink, "paper-paper-author (proportion of paths: 1.00)", link_steps),
        ("hop2_author_paper", &citation, "a1", "paper", 2, TemplateId::PretrainLink, "author-paper-paper (proportion of paths: 1.00)", link_steps),
        (
            "hop2_paper_paper",
            &citation,
            "p0",
            "paper",
            2,
            TemplateId::PretrainLink,
            "paper-paper-paper (proportion of paths: 0.33), paper-author-paper (proportion of paths: 0.67)",
            link_steps,
        ),
        (
            "hop3_author_author_link",
            &citation_free,
            "a0",
            "author",
            3,
            TemplateId::PretrainLink,
            "author-paper-paper-author (proportion of paths: 0.00)",
            link_steps,
        ),
        (
            "hop3_author_author_classify",
            &citation_free,
            "a0",
            "author",
            3,
            TemplateId::FinetuneClassify,
            "author-paper-paper-author (proportion of paths: 0.00)",
            classify_steps,
        ),
    ];
    for (name, g, src, dst, hop, template, path_line, steps) in cases {
        let text = render(g, src, dst, hop, template)?;
        let golden = std::fs::read_to_string(golden_dir.join(format!("{name}.txt")))?;
        ensure!(text == golden, "{name}: rendered {text:?}");
        ensure!(text.contains(path_line), "{name}: path line missing");
        ensure!(text.ends_with(steps), "{name}: step sentences missing");
    }
    Ok(format!("{} golden prompts match", cases.len()))
}
