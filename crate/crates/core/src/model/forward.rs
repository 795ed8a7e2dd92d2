use std::sync::Arc;

use rayon::prelude::*;

use super::{ModelConfig, ModelParams};
use crate::encoder::TokenTable;
use crate::error::{Error, Result};
use crate::graph::{HeteroGraph, NodeIdx, TypeIdx};
use crate::tensor::{ParamVars, Segments, Tape, Tensor, Var};

/// Targets per tape in [`embed_nodes`].
const EMBED_CHUNK: usize = 256;

/// Token layout for a set of targets, ready for a batched forward pass.
///
/// Relation tokens of one (target, hop) pair are contiguous rows; so are the
/// hop-sequence rows of one target.
#[derive(Debug, Clone)]
pub struct Batch {
    dim: usize,
    targets: Vec<NodeIdx>,
    node_tokens: Tensor,
    rel_tokens: Tensor,
    /// Target position owning each relation row.
    rel_owner: Vec<usize>,
    /// (hop, type) of each relation row.
    rel_key: Vec<(usize, TypeIdx)>,
    type_segs: Segments,
    /// Row order of the hop sequences, indexing `[node rows; hop-token rows]`.
    hop_order: Vec<usize>,
    hop_segs: Segments,
    h0_rows: Vec<usize>,
    hj_rows: Vec<usize>,
    hj_owner: Vec<usize>,
    hj_hop: Vec<usize>,
    gamma_segs: Segments,
}

/// A hop index with the relation tokens of the types present at that hop.
pub type HopTokens<'a> = (usize, Vec<(TypeIdx, &'a [f64])>);

pub struct BatchBuilder {
    dim: usize,
    targets: Vec<NodeIdx>,
    node_tokens: Vec<f64>,
    rel_tokens: Vec<f64>,
    rel_owner: Vec<usize>,
    rel_key: Vec<(usize, TypeIdx)>,
    /// Per target: (hop, row range in rel_tokens).
    groups: Vec<Vec<(usize, std::ops::Range<usize>)>>,
}

impl BatchBuilder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            targets: Vec::new(),
            node_tokens: Vec::new(),
            rel_tokens: Vec::new(),
            rel_owner: Vec::new(),
            rel_key: Vec::new(),
            groups: Vec::new(),
        }
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() == self.dim {
            Ok(())
        } else {
            Err(Error::Shape { op: "batch token", lhs: vec![v.len()], rhs: vec![self.dim] })
        }
    }

    /// Add a target with its own token and, per hop, the relation tokens of
    /// the types present. Hops with no types are skipped.
    pub fn push(
        &mut self,
        node: NodeIdx,
        token: &[f64],
        hops: &[HopTokens<'_>],
    ) -> Result<()> {
        self.check_dim(token)?;
        for (_, types) in hops {
            for (_, v) in types {
                self.check_dim(v)?;
            }
        }
        let pos = self.targets.len();
        self.targets.push(node);
        self.node_tokens.extend_from_slice(token);
        let mut groups = Vec::new();
        for (hop, types) in hops {
            if types.is_empty() {
                continue;
            }
            let start = self.rel_owner.len();
            for (t, v) in types {
                self.rel_tokens.extend_from_slice(v);
                self.rel_owner.push(pos);
                self.rel_key.push((*hop, *t));
            }
            groups.push((*hop, start..self.rel_owner.len()));
        }
        self.groups.push(groups);
        Ok(())
    }

    pub fn finish(self) -> Batch {
        let n = self.targets.len();
        let m = self.rel_owner.len();
        let mut type_segs = Vec::new();
        let mut hop_order = Vec::new();
        let mut hop_segs = Vec::new();
        let mut h0_rows = Vec::new();
        let mut hj_rows = Vec::new();
        let mut hj_owner = Vec::new();
        let mut hj_hop = Vec::new();
        let mut gamma_segs = Vec::new();
        for (pos, groups) in self.groups.iter().enumerate() {
            let seq_start = hop_order.len();
            hop_order.push(pos);
            h0_rows.push(seq_start);
            let g_start = hj_rows.len();
            for (hop, range) in groups {
                hj_rows.push(hop_order.len());
                hop_order.push(n + type_segs.len());
                hj_owner.push(pos);
                hj_hop.push(*hop);
                type_segs.push(range.clone());
            }
            hop_segs.push(seq_start..hop_order.len());
            gamma_segs.push(g_start..hj_rows.len());
        }
        Batch {
            dim: self.dim,
            node_tokens: Tensor::matrix(n, self.dim, self.node_tokens).expect("dims checked on push"),
            rel_tokens: Tensor::matrix(m, self.dim, self.rel_tokens).expect("dims checked on push"),
            targets: self.targets,
            rel_owner: self.rel_owner,
            rel_key: self.rel_key,
            type_segs: Arc::new(type_segs),
            hop_order,
            hop_segs: Arc::new(hop_segs),
            h0_rows,
            hj_rows,
            hj_owner,
            hj_hop,
            gamma_segs: Arc::new(gamma_segs),
        }
    }
}

impl Batch {
    /// Layout for `targets` from a token table, using hops `1..=hops`.
    pub fn from_table(
        g: &HeteroGraph,
        table: &TokenTable,
        targets: &[NodeIdx],
        hops: usize,
    ) -> Result<Self> {
        if table.hops < hops {
            return Err(Error::MissingToken(format!(
                "token table covers {} hops but the model needs {hops}",
                table.hops
            )));
        }
        let mut b = BatchBuilder::new(table.dim);
        for &s in targets {
            let id = g.node_id(s);
            let u = table
                .node_token(s)
                .ok_or_else(|| Error::MissingToken(format!("node token of `{id}`")))?;
            let mut per_hop = Vec::with_capacity(hops);
            for hop in 1..=hops {
                let types = table.hop_types.get(&(s, hop)).ok_or_else(|| {
                    Error::MissingToken(format!("hop {hop} of `{id}` was not tokenized"))
                })?;
                let mut toks = Vec::with_capacity(types.len());
                for &t in types {
                    let v = table.relation_token(s, hop, t).ok_or_else(|| {
                        Error::MissingToken(format!(
                            "relation token of `{id}` at (hop {hop}, type `{}`)",
                            g.schema().type_name(t)
                        ))
                    })?;
                    toks.push((t, v));
                }
                per_hop.push((hop, toks));
            }
            b.push(s, u, &per_hop)?;
        }
        Ok(b.finish())
    }

    pub fn targets(&self) -> &[NodeIdx] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Tape handles of one forward pass. `z` is `N x d` in target order,
/// `alpha` is one row per relation token, `gamma` one row per hop token.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub z: Var,
    pub alpha: Var,
    pub gamma: Var,
}

/// Readout attention of a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionCapture {
    /// (target, hop, node type, alpha).
    pub alpha: Vec<(NodeIdx, usize, TypeIdx, f64)>,
    /// (target, hop, gamma).
    pub gamma: Vec<(NodeIdx, usize, f64)>,
}

impl AttentionCapture {
    pub fn from_tape(tape: &Tape, out: &ForwardOutput, batch: &Batch) -> Self {
        let a = tape.value(out.alpha).data();
        let g = tape.value(out.gamma).data();
        Self {
            alpha: batch
                .rel_key
                .iter()
                .zip(&batch.rel_owner)
                .zip(a)
                .map(|((&(hop, t), &pos), &w)| (batch.targets[pos], hop, t, w))
                .collect(),
            gamma: batch
                .hj_hop
                .iter()
                .zip(&batch.hj_owner)
                .zip(g)
                .map(|((&hop, &pos), &w)| (batch.targets[pos], hop, w))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: AttentionCapture) {
        self.alpha.extend(other.alpha);
        self.gamma.extend(other.gamma);
    }
}

/// Affine map of encoder-space rows into model space.
pub fn project(t: &mut Tape, vars: &ParamVars, x: Var) -> Result<Var> {
    let w = vars.get("proj.w")?;
    let b = vars.get("proj.b")?;
    let y = t.matmul(x, w)?;
    t.add_row(y, b)
}

fn layer_norm(t: &mut Tape, vars: &ParamVars, x: Var, prefix: &str) -> Result<Var> {
    let g = vars.get(&format!("{prefix}.g"))?;
    let b = vars.get(&format!("{prefix}.b"))?;
    let y = t.layer_norm(x)?;
    let y = t.mul_row(y, g)?;
    t.add_row(y, b)
}

/// One pre-LN layer: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
fn encoder_layer(
    t: &mut Tape,
    vars: &ParamVars,
    prefix: &str,
    heads: usize,
    x: Var,
    segs: &Segments,
) -> Result<Var> {
    let p = |n: &str| format!("{prefix}.{n}");
    let h = layer_norm(t, vars, x, &p("ln1"))?;
    let q = t.matmul(h, vars.get(&p("wq"))?)?;
    let k = t.matmul(h, vars.get(&p("wk"))?)?;
    let v = t.matmul(h, vars.get(&p("wv"))?)?;
    let a = t.segment_attention(q, k, v, segs, heads)?;
    let o = t.matmul(a, vars.get(&p("wo"))?)?;
    let x = t.add(x, o)?;
    let h = layer_norm(t, vars, x, &p("ln2"))?;
    let f = t.matmul(h, vars.get(&p("ffn.w1"))?)?;
    let f = t.add_row(f, vars.get(&p("ffn.b1"))?)?;
    let f = t.relu(f)?;
    let f = t.matmul(f, vars.get(&p("ffn.w2"))?)?;
    let f = t.add_row(f, vars.get(&p("ffn.b2"))?)?;
    t.add(x, f)
}

fn check_nonempty(op: &str, segs: &Segments) -> Result<()> {
    if segs.is_empty() || segs.iter().any(|r| r.is_empty()) {
        return Err(Error::Config(format!("{op}: empty token sequence")));
    }
    Ok(())
}

/// Type block over every segment of `x` (one segment per (target, hop)).
pub fn type_block(
    t: &mut Tape,
    vars: &ParamVars,
    cfg: &ModelConfig,
    mut x: Var,
    segs: &Segments,
) -> Result<Var> {
    check_nonempty("type block", segs)?;
    for l in 0..cfg.type_layers {
        x = encoder_layer(t, vars, &format!("type.{l}"), cfg.heads, x, segs)?;
    }
    Ok(x)
}

/// Hop block over every segment of `x` (one segment per target, each of
/// length at most `K + 1`).
pub fn hop_block(
    t: &mut Tape,
    vars: &ParamVars,
    cfg: &ModelConfig,
    mut x: Var,
    segs: &Segments,
) -> Result<Var> {
    check_nonempty("hop block", segs)?;
    if let Some(r) = segs.iter().find(|r| r.len() > cfg.hops + 1) {
        return Err(Error::Config(format!(
            "hop block: sequence of {} tokens exceeds K + 1 = {}",
            r.len(),
            cfg.hops + 1
        )));
    }
    for l in 0..cfg.hop_layers {
        x = encoder_layer(t, vars, &format!("hop.{l}"), cfg.heads, x, segs)?;
    }
    Ok(x)
}

/// `alpha = softmax(u_s . u_hat_j)` within each segment and the weighted sum
/// of `u_hat` per segment. `us` holds the target token for every row of
/// `uhat`. Returns (hop tokens, alpha column).
pub fn type_readout(t: &mut Tape, us: Var, uhat: Var, segs: &Segments) -> Result<(Var, Var)> {
    let prod = t.mul(us, uhat)?;
    let scores = t.sum_cols(prod)?;
    let alpha = t.segment_softmax(scores, segs)?;
    let weighted = t.mul_col(uhat, alpha)?;
    Ok((t.segment_sum(weighted, segs)?, alpha))
}

/// `z = h0 + sum_j gamma_j h_j` with `gamma = softmax_j([h0 || h_j] W)`.
/// Row `i` of `hj` belongs to target `owner[i]`; `segs[n]` spans the hop
/// rows of target `n` (possibly empty). Returns (z, gamma column).
pub fn hop_readout(
    t: &mut Tape,
    vars: &ParamVars,
    d: usize,
    h0: Var,
    hj: Var,
    owner: &[usize],
    segs: &Segments,
) -> Result<(Var, Var)> {
    let w = vars.get("readout.w")?;
    let wa = t.slice_rows(w, 0, d)?;
    let wb = t.slice_rows(w, d, 2 * d)?;
    let s0 = t.matmul(h0, wa)?;
    let s0 = t.select_rows(s0, owner)?;
    let sj = t.matmul(hj, wb)?;
    let scores = t.add(s0, sj)?;
    let gamma = t.segment_softmax(scores, segs)?;
    let weighted = t.mul_col(hj, gamma)?;
    let sum = t.segment_sum(weighted, segs)?;
    Ok((t.add(h0, sum)?, gamma))
}

/// Final embeddings of every target in `batch`.
pub fn forward(
    t: &mut Tape,
    vars: &ParamVars,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<ForwardOutput> {
    if batch.dim != cfg.d_llm {
        return Err(Error::Shape { op: "project", lhs: vec![batch.dim], rhs: vec![cfg.d_llm] });
    }
    let u_raw = t.constant(batch.node_tokens.clone());
    let u = project(t, vars, u_raw)?;
    let (hop_tokens, alpha) = if batch.rel_owner.is_empty() {
        let empty = t.constant(Tensor::zeros(0, cfg.d));
        (empty, t.constant(Tensor::zeros(0, 1)))
    } else {
        let r_raw = t.constant(batch.rel_tokens.clone());
        let r = project(t, vars, r_raw)?;
        let uhat = type_block(t, vars, cfg, r, &batch.type_segs)?;
        let us = t.select_rows(u, &batch.rel_owner)?;
        type_readout(t, us, uhat, &batch.type_segs)?
    };
    let all = t.concat_rows(&[u, hop_tokens])?;
    let seq = t.select_rows(all, &batch.hop_order)?;
    let hhat = hop_block(t, vars, cfg, seq, &batch.hop_segs)?;
    let h0 = t.select_rows(hhat, &batch.h0_rows)?;
    let hj = t.select_rows(hhat, &batch.hj_rows)?;
    let (z, gamma) = hop_readout(t, vars, cfg.d, h0, hj, &batch.hj_owner, &batch.gamma_segs)?;
    Ok(ForwardOutput { z, alpha, gamma })
}

/// Embeddings of `targets` (rows in the same order) without gradients.
/// Chunks of targets run on separate tapes in parallel; each row depends
/// only on its own target, so the result does not depend on chunking.
pub fn embed_nodes(
    params: &ModelParams,
    g: &HeteroGraph,
    table: &TokenTable,
    targets: &[NodeIdx],
    capture: bool,
) -> Result<(Tensor, Option<AttentionCapture>)> {
    let cfg = &params.config;
    let parts: Vec<(Vec<f64>, AttentionCapture)> = targets
        .par_chunks(EMBED_CHUNK)
        .map(|chunk| {
            let batch = Batch::from_table(g, table, chunk, cfg.hops)?;
            let mut tape = Tape::new();
            let vars = params.store.bind(&mut tape, |_| false);
            let out = forward(&mut tape, &vars, cfg, &batch)?;
            let cap = if capture {
                AttentionCapture::from_tape(&tape, &out, &batch)
            } else {
                AttentionCapture::default()
            };
            Ok((tape.value(out.z).data().to_vec(), cap))
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(targets.len() * cfg.d);
    let mut cap = AttentionCapture::default();
    for (z, c) in parts {
        data.extend(z);
        cap.extend(c);
    }
    Ok((Tensor::matrix(targets.len(), cfg.d, data)?, capture.then_some(cap)))
}
