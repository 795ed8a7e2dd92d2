//! `hetrel`: ingest graphs, build relation tokens, train, evaluate and
//! profile from the command line.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "hetrel", version, about = "Relation-token heterogeneous graph learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load JSON Lines nodes and edges plus a JSON schema into a graph directory.
    Ingest {
        #[arg(long)]
        nodes: PathBuf,
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode node texts and relation prompts into a token table.
    Tokenize {
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long)]
        hops: usize,
        #[arg(long, value_enum)]
        template: Template,
        /// Only tokenize nodes of this type (default: every node).
        #[arg(long)]
        target_type: Option<String>,
        /// Token table to write.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Contrastive edge pre-training of the full model.
    Pretrain {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        tokens: PathBuf,
        /// TOML file with `[model]` and `[pretrain]` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-epoch and final attention CSVs here.
        #[arg(long)]
        attention_dir: Option<PathBuf>,
    },
    /// Train a classification head on the frozen pre-trained backbone.
    Finetune {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// `node_id,label` CSV.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        target_type: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seed of the train/validation/test node split.
        #[arg(long, default_value_t = 0)]
        node_splits_seed: u64,
        /// TOML file; only the `[finetune]` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint with the trained head.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score held-out nodes or links. Repeat `--ckpt` and `--splits-seed`
    /// in pairs to report the mean and standard deviation over runs.
    Evaluate {
        #[arg(long, value_enum)]
        task: Task,
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long = "splits-seed", required = true)]
        splits_seeds: Vec<u64>,
        /// Node task: `node_id,label` CSV.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Node task: labeled node type.
        #[arg(long)]
        target_type: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tokenize with instrumentation and compare against per-path encoding.
    Profile {
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long)]
        hops: usize,
        #[arg(long, value_enum, default_value_t = Template::Pretrain)]
        template: Template,
        /// Only profile nodes of this type (default: every node).
        #[arg(long)]
        target_type: Option<String>,
        /// Only profile these node ids (repeatable).
        #[arg(long = "target")]
        targets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write readout attention CSVs for every target in a token table.
    ExportAttention {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
pub struct GraphArgs {
    /// Graph directory written by `ingest`.
    #[arg(long)]
    pub graph: PathBuf,
    /// Drop the validation and test links of the link split with this
    /// seed before using the graph.
    #[arg(long)]
    pub link_holdout_seed: Option<u64>,
}

#[derive(Args, Clone)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value_t = Backend::Mock)]
    pub backend: Backend,
    /// Base URL of the HTTP encoder service.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Mock encoder output dimension.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, value_enum, default_value_t = PoolingArg::Mean)]
    pub pooling: PoolingArg,
    /// Persistent embedding cache file.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Mock,
    Http,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
pub enum PoolingArg {
    Mean,
    Last,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    Pretrain,
    Finetune,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Node,
    Link,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Ingest { nodes, edges, schema, out } => commands::ingest(&nodes, &edges, &schema, &out),
        Command::Tokenize { graph, backend, hops, template, target_type, out, workers } => {
            commands::tokenize(&graph, &backend, hops, template, target_type.as_deref(), &out, workers)
        }
        Command::Pretrain { graph, tokens, config, seed, out, attention_dir } => {
            commands::pretrain(&graph, &tokens, config.as_deref(), seed, &out, attention_dir.as_deref())
        }
        Command::Finetune { graph, tokens, ckpt, labels, target_type, seed, node_splits_seed, config, out } => {
            commands::finetune(commands::FinetuneArgs {
                graph: &graph,
                tokens: &tokens,
                ckpt: &ckpt,
                labels: &labels,
                target_type: &target_type,
                seed,
                splits_seed: node_splits_seed,
                config: config.as_deref(),
                out: &out,
            })
        }
        Command::Evaluate { task, graph, tokens, ckpt, splits_seeds, labels, target_type, out } => {
            commands::evaluate(commands::EvaluateArgs {
                task,
                graph: &graph,
                tokens: &tokens,
                ckpts: &ckpt,
                seeds: &splits_seeds,
                labels: labels.as_deref(),
                target_type: target_type.as_deref(),
                out: &out,
            })
        }
        Command::Profile { graph, backend, hops, template, target_type, targets, out } => {
            commands::profile(&graph, &backend, hops, template, target_type.as_deref(), &targets, &out)
        }
        Command::ExportAttention { graph, tokens, ckpt, out } => {
            commands::export_attention(&graph, &tokens, &ckpt, &out)
        }
    }
}
