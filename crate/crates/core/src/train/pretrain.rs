use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::sampling::{hold_out, resample_negatives, sample_edges, EdgeSampleSet, Pair};
use super::SIM_EPS;
use crate::encoder::TokenTable;
use crate::error::{Error, Result};
use crate::eval::AttentionSummary;
use crate::graph::{HeteroGraph, NodeIdx, TypeIdx};
use crate::model::{forward, is_head, sim_name, AttentionCapture, Batch, ModelParams};
use crate::tensor::{Adam, AdamConfig, ParamVars, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Negatives per training positive, redrawn every epoch.
    pub neg_ratio: usize,
    /// Share of positives per relation type held out for validation.
    pub val_fraction: f64,
    /// Record per-epoch readout attention summaries.
    pub capture_attention: bool,
    /// Where to write the parameters if training diverges.
    pub dump_path: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            max_epochs: 500,
            patience: 30,
            neg_ratio: 1,
            val_fraction: 0.1,
            capture_attention: false,
            dump_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    /// Parameters at the epoch with the lowest validation loss.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
    /// Per-epoch readout attention, when capture is enabled.
    pub attention: Vec<(usize, AttentionSummary)>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn project_row(params: &ModelParams, z: &[f64], node_type: &str) -> Result<Vec<f64>> {
    let w = params.store.get(&sim_name(node_type))?;
    if w.rows() != z.len() {
        return Err(Error::Shape { op: "similarity", lhs: vec![1, z.len()], rhs: w.shape().to_vec() });
    }
    Ok((0..w.cols()).map(|j| (0..w.rows()).map(|i| z[i] * w.get(i, j)).sum()).collect())
}

/// `sigmoid(z_s W_{type(s)} . z_t W_{type(t)})`.
pub fn similarity(
    params: &ModelParams,
    z_s: &[f64],
    type_s: &str,
    z_t: &[f64],
    type_t: &str,
) -> Result<f64> {
    let a = project_row(params, z_s, type_s)?;
    let b = project_row(params, z_t, type_t)?;
    Ok(sigmoid(dot(&a, &b)))
}

/// `-sum ln sim(pos) - sum ln (1 - sim(neg))` with similarities clamped away
/// from 0 and 1.
pub fn pretrain_loss(pos_sims: &[f64], neg_sims: &[f64]) -> f64 {
    let c = |x: f64| x.clamp(SIM_EPS, 1.0 - SIM_EPS);
    -pos_sims.iter().map(|&s| c(s).ln()).sum::<f64>()
        - neg_sims.iter().map(|&s| c(1.0 - s).ln()).sum::<f64>()
}

/// Same loss from raw logits, computed exactly as the training graph does.
pub fn pretrain_loss_from_logits(logits: &[f64], positive: &[bool]) -> f64 {
    logits
        .iter()
        .zip(positive)
        .map(|(&x, &p)| -sigmoid(if p { x } else { -x }).clamp(SIM_EPS, 1.0 - SIM_EPS).ln())
        .sum()
}

/// `m x 1` logits `z_s W_{type(s)} . z_t W_{type(t)}` for every pair. Row
/// `i` of `z` embeds `nodes[i]`.
pub fn pair_logits(
    t: &mut Tape,
    vars: &ParamVars,
    g: &HeteroGraph,
    z: Var,
    nodes: &[NodeIdx],
    pairs: &[Pair],
) -> Result<Var> {
    let pos: HashMap<NodeIdx, usize> = nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut used: Vec<NodeIdx> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    used.sort_unstable();
    used.dedup();
    let mut by_type: BTreeMap<TypeIdx, Vec<NodeIdx>> = BTreeMap::new();
    for v in used {
        by_type.entry(g.node_type(v)).or_default().push(v);
    }
    let mut blocks = Vec::new();
    let mut proj_row: HashMap<NodeIdx, usize> = HashMap::new();
    for (ty, members) in &by_type {
        let rows = members
            .iter()
            .map(|v| {
                pos.get(v).copied().ok_or_else(|| {
                    Error::MissingToken(format!("no embedding for `{}`", g.node_id(*v)))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for v in members {
            proj_row.insert(*v, proj_row.len());
        }
        let zt = t.select_rows(z, &rows)?;
        let w = vars.get(&sim_name(g.schema().type_name(*ty)))?;
        blocks.push(t.matmul(zt, w)?);
    }
    if blocks.is_empty() {
        return Ok(t.constant(Tensor::zeros(0, 1)));
    }
    let all = t.concat_rows(&blocks)?;
    let left: Vec<usize> = pairs.iter().map(|(a, _)| proj_row[a]).collect();
    let right: Vec<usize> = pairs.iter().map(|(_, b)| proj_row[b]).collect();
    let l = t.select_rows(all, &left)?;
    let r = t.select_rows(all, &right)?;
    let prod = t.mul(l, r)?;
    t.sum_cols(prod)
}

/// Tape version of [`pretrain_loss_from_logits`].
pub fn pretrain_loss_var(t: &mut Tape, logits: Var, positive: &[bool]) -> Result<Var> {
    let signs: Vec<f64> = positive.iter().map(|&p| if p { 1.0 } else { -1.0 }).collect();
    let n = signs.len();
    let s = t.constant(Tensor::matrix(n, 1, signs)?);
    let x = t.mul(logits, s)?;
    let sim = t.sigmoid(x)?;
    let sim = t.clamp(sim, SIM_EPS, 1.0 - SIM_EPS)?;
    let l = t.log(sim)?;
    let total = t.sum(l)?;
    t.scale(total, -1.0)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn pair_keys(set: &EdgeSampleSet) -> HashSet<Pair> {
    set.by_type
        .values()
        .flat_map(|s| s.negatives.iter().map(|&(a, b)| (a.min(b), a.max(b))))
        .collect()
}

/// Full-batch contrastive pre-training of every non-head parameter.
///
/// Positives are all edges of `g`, a `val_fraction` of them per relation
/// type held out for validation with fixed negatives. Training negatives
/// are redrawn each epoch. Each epoch computes both losses from one forward
/// pass, then takes one Adam step on the training loss. Stops once
/// `patience` epochs pass without a strictly lower validation loss and
/// returns the parameters that produced the best one.
pub fn pretrain(
    g: &HeteroGraph,
    table: &TokenTable,
    mut params: ModelParams,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    let all = sample_edges(g, cfg.neg_ratio, seed)?;
    let (train_pos, mut val) = hold_out(&all, cfg.val_fraction, seed);
    resample_negatives(g, &mut val, cfg.neg_ratio, seed.rotate_left(17), &HashSet::new())?;
    let val_keys = pair_keys(&val);
    let val_pairs = val.labeled_pairs();
    let (val_p, val_l): (Vec<Pair>, Vec<bool>) = val_pairs.into_iter().unzip();

    // every node of an endpoint type can show up in a negative
    let mut types: Vec<TypeIdx> = all
        .by_type
        .keys()
        .flat_map(|&et| {
            let (a, b) = g.schema().edge_endpoints(et);
            [a, b]
        })
        .collect();
    types.sort_unstable();
    types.dedup();
    let mut nodes: Vec<NodeIdx> = types.iter().flat_map(|&t| g.nodes_of_type(t).iter().copied()).collect();
    nodes.sort_unstable();
    let batch = Batch::from_table(g, table, &nodes, params.config.hops)?;

    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut history = Vec::new();
    let mut attention = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut epochs_run = 0;
    for epoch in 0..cfg.max_epochs {
        let mut train = train_pos.clone();
        resample_negatives(g, &mut train, cfg.neg_ratio, epoch_seed(seed, epoch), &val_keys)?;
        let (train_p, train_l): (Vec<Pair>, Vec<bool>) = train.labeled_pairs().into_iter().unzip();

        let mut tape = Tape::new();
        let vars = params.store.bind(&mut tape, |n| !is_head(n));
        let out = forward(&mut tape, &vars, &params.config, &batch)?;
        let lt = pair_logits(&mut tape, &vars, g, out.z, &nodes, &train_p)?;
        let loss = pretrain_loss_var(&mut tape, lt, &train_l)?;
        let train_loss = tape.value(loss).item();
        let val_loss = if val_p.is_empty() {
            train_loss
        } else {
            let lv = pair_logits(&mut tape, &vars, g, out.z, &nodes, &val_p)?;
            pretrain_loss_from_logits(tape.value(lv).data(), &val_l)
        };
        if !train_loss.is_finite() || !val_loss.is_finite() {
            if let Some(path) = &cfg.dump_path {
                params.save(path)?;
                log::error!("diverged at epoch {epoch}; parameters written to {}", path.display());
            }
            let loss = if train_loss.is_finite() { val_loss } else { train_loss };
            return Err(Error::Diverged { epoch, loss });
        }
        if cfg.capture_attention {
            let cap = AttentionCapture::from_tape(&tape, &out, &batch);
            attention.push((epoch, AttentionSummary::from_capture(g, &cap)));
        }
        history.push(EpochRecord { epoch, train_loss, val_loss });
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, params.clone()));
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        adam.step(&mut params.store, &vars, &grads)?;
        epochs_run = epoch + 1;
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (best_epoch, best_val_loss, params) = match best {
        Some(b) => b,
        None => return Err(Error::Config("pre-training needs at least one epoch".into())),
    };
    Ok(PretrainReport { params, best_epoch, best_val_loss, epochs_run, history, attention })
}
