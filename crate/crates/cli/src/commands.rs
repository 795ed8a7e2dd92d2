use std::collections::BTreeSet;
use std::fs::File;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use hetrel_core::encoder::{
    tokenize_graph, EmbeddingCache, Encoder, EncoderBackend, HttpBackend, MockBackend, Pooling,
    TokenTable, TokenizeConfig,
};
use hetrel_core::eval::{
    auc, average_precision, export_attention as write_attention, link_split, macro_f1, micro_f1,
    node_split, profile_run, NodeLabels,
};
use hetrel_core::graph::{load_graph, HeteroGraph, NodeIdx};
use hetrel_core::meta::RunMetadata;
use hetrel_core::model::{embed_nodes, ModelParams};
use hetrel_core::prompt::TemplateId;
use hetrel_core::train::{self, predict, similarity};
use serde_json::json;

use crate::config::RunConfig;
use crate::{Backend, BackendArgs, GraphArgs, PoolingArg, Task, Template};

fn load(args: &GraphArgs) -> Result<HeteroGraph> {
    let (g, _) = HeteroGraph::load_dir(&args.graph)
        .with_context(|| format!("loading graph from {}", args.graph.display()))?;
    match args.link_holdout_seed {
        None => Ok(g),
        Some(seed) => {
            let split = link_split(&g, seed)?;
            log::info!("dropping {} held-out links (seed {seed})", split.held_out_edges.len());
            Ok(g.without_edges(&split.held_out_edges))
        }
    }
}

fn graph_meta(m: &mut RunMetadata, args: &GraphArgs) {
    m.config["graph"] = json!(args.graph);
    if let Some(s) = args.link_holdout_seed {
        m.config["link_holdout_seed"] = json!(s);
        m.seeds.push(s);
    }
}

fn encoder(args: &BackendArgs) -> Result<(Encoder, Arc<EmbeddingCache>)> {
    let backend: Arc<dyn EncoderBackend> = match args.backend {
        Backend::Mock => Arc::new(MockBackend::new(args.dim)),
        Backend::Http => {
            let url = args.endpoint.as_deref().context("--endpoint is required with --backend http")?;
            Arc::new(HttpBackend::connect(url)?)
        }
    };
    let cache = Arc::new(match &args.cache {
        Some(p) => EmbeddingCache::open(p)?,
        None => EmbeddingCache::in_memory(),
    });
    let pooling = match args.pooling {
        PoolingArg::Mean => Pooling::Mean,
        PoolingArg::Last => Pooling::Last,
    };
    Ok((Encoder::with_pooling(backend, cache.clone(), pooling), cache))
}

fn template(t: Template) -> TemplateId {
    match t {
        Template::Pretrain => TemplateId::PretrainLink,
        Template::Finetune => TemplateId::FinetuneClassify,
    }
}

fn targets_of(g: &HeteroGraph, node_type: Option<&str>, ids: &[String]) -> Result<Vec<NodeIdx>> {
    if !ids.is_empty() {
        return ids.iter().map(|id| Ok(g.node_index(id)?)).collect();
    }
    match node_type {
        Some(t) => {
            let ti = g.schema().node_type(t).with_context(|| format!("unknown node type `{t}`"))?;
            Ok(g.nodes_of_type(ti).to_vec())
        }
        None => Ok((0..g.num_nodes()).collect()),
    }
}

fn backend_meta(m: &mut RunMetadata, enc: &Encoder) {
    m.backend = Some(enc.backend_name().to_string());
    m.pooling = Some(enc.pooling().as_str().to_string());
}

pub fn ingest(nodes: &Path, edges: &Path, schema: &Path, out: &Path) -> Result<()> {
    let (g, report) = load_graph(nodes, edges, schema)?;
    g.save_dir(out)?;
    let mut m = RunMetadata::new("ingest");
    m.config = json!({ "nodes": nodes, "edges": edges, "schema": schema });
    m.results = json!({
        "nodes": g.num_nodes(),
        "edges": g.num_edges(),
        "node_types": g.type_counts(),
        "duplicate_edges": report.duplicate_edges,
    });
    m.write_for(out)?;
    println!("{} nodes, {} edges ({} duplicates dropped)", g.num_nodes(), g.num_edges(), report.duplicate_edges);
    Ok(())
}

pub fn tokenize(
    graph: &GraphArgs,
    backend: &BackendArgs,
    hops: usize,
    tmpl: Template,
    target_type: Option<&str>,
    out: &Path,
    workers: usize,
) -> Result<()> {
    let g = load(graph)?;
    let (enc, cache) = encoder(backend)?;
    let targets = targets_of(&g, target_type, &[])?;
    let mut cfg = TokenizeConfig::new(hops, template(tmpl));
    cfg.workers = workers;
    let table = tokenize_graph(&enc, &g, &targets, &cfg)?;
    cache.persist()?;
    table.save(&g, out)?;

    let mut m = RunMetadata::new("tokenize");
    graph_meta(&mut m, graph);
    m.config["hops"] = json!(hops);
    m.config["template"] = json!(cfg.template.as_str());
    m.config["targets"] = json!(targets.len());
    backend_meta(&mut m, &enc);
    m.results = json!({
        "backend_calls": table.call_count,
        "node_calls": table.stats.node_calls,
        "cache_hits": table.cache_hits,
        "cache_complete": table.call_count == 0,
    });
    m.write_for(out)?;
    println!("backend calls: {}", table.call_count);
    println!("cache hits: {}", table.cache_hits);
    if table.call_count == 0 {
        println!("cache-complete");
    }
    Ok(())
}

pub fn pretrain(
    graph: &GraphArgs,
    tokens: &Path,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
    attention_dir: Option<&Path>,
) -> Result<()> {
    let g = load(graph)?;
    let table = TokenTable::load(&g, tokens)?;
    let mut cfg = RunConfig::load(config)?;
    if attention_dir.is_some() {
        cfg.pretrain.capture_attention = true;
    }
    if cfg.pretrain.dump_path.is_none() {
        cfg.pretrain.dump_path = Some(out.with_extension("diverged"));
    }
    let model = cfg.model.build(table.dim, table.hops);
    model.validate()?;
    let params = ModelParams::init(model.clone(), g.schema(), seed)?;
    let report = train::pretrain(&g, &table, params, &cfg.pretrain, seed)?;
    report.params.save(out)?;

    let history = out.with_extension("history.csv");
    let mut w = csv::Writer::from_path(&history)?;
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    for r in &report.history {
        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.val_loss.to_string()])?;
    }
    w.flush()?;

    if let Some(dir) = attention_dir {
        let targets: Vec<NodeIdx> = table.targets().into_iter().collect();
        let (_, cap) = embed_nodes(&report.params, &g, &table, &targets, true)?;
        write_attention(&g, cap.as_ref(), &report.attention, dir)?;
    }

    let mut m = RunMetadata::new("pretrain");
    graph_meta(&mut m, graph);
    m.seeds.push(seed);
    m.config["model"] = serde_json::to_value(&model)?;
    m.config["pretrain"] = serde_json::to_value(&cfg.pretrain)?;
    m.epochs_run = Some(report.epochs_run);
    m.hashes.push(("checkpoint".into(), report.params.content_hash()));
    m.results = json!({
        "best_epoch": report.best_epoch,
        "best_val_loss": report.best_val_loss,
        "history": history,
    });
    m.write_for(out)?;
    println!(
        "best epoch {} (val loss {:.6}) after {} epochs",
        report.best_epoch, report.best_val_loss, report.epochs_run
    );
    println!("checkpoint hash {}", report.params.content_hash());
    Ok(())
}

pub struct FinetuneArgs<'a> {
    pub graph: &'a GraphArgs,
    pub tokens: &'a Path,
    pub ckpt: &'a Path,
    pub labels: &'a Path,
    pub target_type: &'a str,
    pub seed: u64,
    pub splits_seed: u64,
    pub config: Option<&'a Path>,
    pub out: &'a Path,
}

pub fn finetune(a: FinetuneArgs<'_>) -> Result<()> {
    let g = load(a.graph)?;
    let table = TokenTable::load(&g, a.tokens)?;
    let cfg = RunConfig::load(a.config)?;
    let params = ModelParams::load(a.ckpt)?;
    let labels = NodeLabels::from_csv(&g, a.target_type, a.labels)?;
    let split = node_split(&labels, a.splits_seed)?;
    let report = train::finetune(&g, &table, params, &split, &cfg.finetune, a.seed)?;
    ensure!(
        report.backbone_hash_before == report.backbone_hash_after,
        "backbone changed during fine-tuning"
    );
    report.params.save(a.out)?;

    let mut m = RunMetadata::new("finetune");
    graph_meta(&mut m, a.graph);
    m.seeds.extend([a.seed, a.splits_seed]);
    m.config["finetune"] = serde_json::to_value(&cfg.finetune)?;
    m.config["target_type"] = json!(a.target_type);
    m.chosen_lr = Some(report.chosen_lr);
    let chosen = report.grid.iter().find(|p| p.lr == report.chosen_lr);
    m.epochs_run = chosen.map(|p| p.epochs_run);
    m.hashes.push(("pretrained".into(), ModelParams::load(a.ckpt)?.content_hash()));
    m.hashes.push(("backbone".into(), report.backbone_hash_after.clone()));
    m.hashes.push(("checkpoint".into(), report.params.content_hash()));
    m.results = json!({
        "grid": report.grid,
        "test_micro_f1": report.test_micro_f1,
        "test_macro_f1": report.test_macro_f1,
    });
    m.write_for(a.out)?;
    println!("chosen lr {}", report.chosen_lr);
    println!("test micro-F1 {:.4} macro-F1 {:.4}", report.test_micro_f1, report.test_macro_f1);
    Ok(())
}

pub struct EvaluateArgs<'a> {
    pub task: Task,
    pub graph: &'a GraphArgs,
    pub tokens: &'a Path,
    pub ckpts: &'a [std::path::PathBuf],
    pub seeds: &'a [u64],
    pub labels: Option<&'a Path>,
    pub target_type: Option<&'a str>,
    pub out: &'a Path,
}

fn node_scores(
    g: &HeteroGraph,
    table: &TokenTable,
    params: &ModelParams,
    labels: &NodeLabels,
    seed: u64,
) -> Result<Vec<(&'static str, f64)>> {
    let split = node_split(labels, seed)?;
    ensure!(!split.test.is_empty(), "the test split is empty");
    let nodes: Vec<NodeIdx> = split.test.iter().map(|x| x.0).collect();
    let golds: Vec<usize> = split.test.iter().map(|x| x.1).collect();
    let (z, _) = embed_nodes(params, g, table, &nodes, false)?;
    let preds = predict(params, &labels.node_type, &z)?;
    let c = labels.classes.len();
    Ok(vec![("micro_f1", micro_f1(&preds, &golds, c)?), ("macro_f1", macro_f1(&preds, &golds, c)?)])
}

fn link_scores(full: &HeteroGraph, table_path: &Path, params: &ModelParams, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let split = link_split(full, seed)?;
    let g = full.without_edges(&split.held_out_edges);
    let table = TokenTable::load(&g, table_path)?;
    let pairs = split.test.labeled();
    let nodes: Vec<NodeIdx> =
        pairs.iter().flat_map(|&((a, b), _)| [a, b]).collect::<BTreeSet<_>>().into_iter().collect();
    let (z, _) = embed_nodes(params, &g, &table, &nodes, false)?;
    let row = |v: NodeIdx| z.row_slice(nodes.binary_search(&v).expect("embedded"));
    let scores = pairs
        .iter()
        .map(|&((a, b), _)| similarity(params, row(a), g.node_type_name(a), row(b), g.node_type_name(b)))
        .collect::<hetrel_core::Result<Vec<f64>>>()?;
    let labels: Vec<bool> = pairs.iter().map(|x| x.1).collect();
    Ok(vec![("auc", auc(&scores, &labels)?), ("ap", average_precision(&scores, &labels)?)])
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn evaluate(a: EvaluateArgs<'_>) -> Result<()> {
    ensure!(
        a.ckpts.len() == a.seeds.len(),
        "give one --splits-seed per --ckpt ({} checkpoints, {} seeds)",
        a.ckpts.len(),
        a.seeds.len()
    );
    if a.task == Task::Link && a.graph.link_holdout_seed.is_some() {
        bail!("link evaluation derives the held-out links from --splits-seed; drop --link-holdout-seed");
    }
    let g = load(a.graph)?;
    let labels = match a.task {
        Task::Node => {
            let path = a.labels.context("--labels is required for the node task")?;
            let t = a.target_type.context("--target-type is required for the node task")?;
            Some(NodeLabels::from_csv(&g, t, path)?)
        }
        Task::Link => None,
    };
    let node_table = match a.task {
        Task::Node => Some(TokenTable::load(&g, a.tokens)?),
        Task::Link => None,
    };

    let mut rows: Vec<(String, u64, &'static str, f64)> = Vec::new();
    let mut hashes = Vec::new();
    for (ckpt, &seed) in a.ckpts.iter().zip(a.seeds) {
        let params = ModelParams::load(ckpt)?;
        hashes.push((ckpt.display().to_string(), params.content_hash()));
        let scores = match (&labels, &node_table) {
            (Some(l), Some(t)) => node_scores(&g, t, &params, l, seed)?,
            _ => link_scores(&g, a.tokens, &params, seed)?,
        };
        for (metric, v) in scores {
            println!("{} seed {seed}: {metric} {v:.4}", ckpt.display());
            rows.push((ckpt.display().to_string(), seed, metric, v));
        }
    }

    let task = match a.task {
        Task::Node => "node",
        Task::Link => "link",
    };
    let mut w = csv::Writer::from_writer(File::create(a.out)?);
    w.write_record(["task", "run", "splits_seed", "metric", "value"])?;
    for (ckpt, seed, metric, v) in &rows {
        w.write_record([task, ckpt, &seed.to_string(), metric, &v.to_string()])?;
    }
    let metrics: BTreeSet<&str> = rows.iter().map(|r| r.2).collect();
    let mut summary = serde_json::Map::new();
    for metric in metrics {
        let xs: Vec<f64> = rows.iter().filter(|r| r.2 == metric).map(|r| r.3).collect();
        let (mean, std) = mean_std(&xs);
        w.write_record([task, "mean", "", metric, &mean.to_string()])?;
        w.write_record([task, "std", "", metric, &std.to_string()])?;
        println!("{metric}: {mean:.4} ± {std:.4}");
        summary.insert(metric.to_string(), json!({ "mean": mean, "std": std }));
    }
    w.flush()?;

    let mut m = RunMetadata::new("evaluate");
    graph_meta(&mut m, a.graph);
    m.seeds.extend(a.seeds);
    m.config["task"] = json!(task);
    m.config["tokens"] = json!(a.tokens);
    m.hashes = hashes;
    m.results = serde_json::Value::Object(summary);
    m.write_for(a.out)?;
    Ok(())
}

pub fn profile(
    graph: &GraphArgs,
    backend: &BackendArgs,
    hops: usize,
    tmpl: Template,
    target_type: Option<&str>,
    target_ids: &[String],
    out: &Path,
) -> Result<()> {
    let g = load(graph)?;
    let (enc, cache) = encoder(backend)?;
    let targets = targets_of(&g, target_type, target_ids)?;
    let cfg = TokenizeConfig::new(hops, template(tmpl));
    let (report, _) = profile_run(&enc, &g, &targets, &cfg)?;
    cache.persist()?;
    report.write_csv(File::create(out)?)?;

    let mut m = RunMetadata::new("profile");
    graph_meta(&mut m, graph);
    m.config["hops"] = json!(hops);
    m.config["template"] = json!(cfg.template.as_str());
    backend_meta(&mut m, &enc);
    m.results = json!({
        "total_calls": report.total_calls,
        "node_calls": report.node_calls,
        "cache_hits": report.cache_hits,
        "cache_complete": report.cache_complete,
        "relation_bound": report.relation_bound(),
        "mean_stored_vectors": report.mean_stored_vectors(),
        "phases": report.phases,
    });
    m.write_for(out)?;
    let relation: u64 = report.targets.iter().map(|t| t.relation_calls).sum();
    let naive: u64 = report.targets.iter().map(|t| t.naive_paths).sum();
    println!("targets: {}", report.targets.len());
    println!("relation-token calls: {relation} (naive per-path encodings: {naive})");
    println!("mean stored vectors per target: {:.3}", report.mean_stored_vectors());
    if report.cache_complete {
        println!("cache-complete");
    }
    Ok(())
}

pub fn export_attention(graph: &GraphArgs, tokens: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let g = load(graph)?;
    let table = TokenTable::load(&g, tokens)?;
    let params = ModelParams::load(ckpt)?;
    let targets: Vec<NodeIdx> = table.targets().into_iter().collect();
    let (_, cap) = embed_nodes(&params, &g, &table, &targets, true)?;
    let files = write_attention(&g, cap.as_ref(), &[], out)?;
    let mut m = RunMetadata::new("export-attention");
    graph_meta(&mut m, graph);
    m.hashes.push(("checkpoint".into(), params.content_hash()));
    m.results = json!({ "files": files });
    m.write_for(out)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}
