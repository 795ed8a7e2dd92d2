use serde::{Deserialize, Serialize};

use crate::encoder::TokenTable;
use crate::error::{Error, Result};
use crate::eval::{macro_f1, micro_f1, NodeSplit};
use crate::graph::{HeteroGraph, NodeIdx};
use crate::model::{embed_nodes, head_names, ModelParams};
use crate::tensor::{Adam, AdamConfig, ParamStore, ParamVars, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Learning rates tried; the one with the best validation Micro-F1 wins.
    pub lr_grid: Vec<f64>,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { lr_grid: vec![1e-2, 1e-3, 1e-4], max_epochs: 1000, patience: 30 }
    }
}

/// Outcome of training the head at one learning rate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    pub lr: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_loss: f64,
    pub val_micro_f1: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    /// Backbone unchanged, head from the chosen learning rate.
    pub params: ModelParams,
    pub chosen_lr: f64,
    pub grid: Vec<GridPoint>,
    pub test_micro_f1: f64,
    pub test_macro_f1: f64,
    /// `(node, predicted class, true class)` for the test split.
    pub test_predictions: Vec<(NodeIdx, usize, usize)>,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

/// Mean cross-entropy of softmax(`logits`) against `labels`.
pub fn classification_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape {
            op: "classification_loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row_slice(i);
        if y >= row.len() {
            return Err(Error::Metric(format!("label {y} out of range for {} classes", row.len())));
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// `z W + b` for the head of `node_type`.
pub fn head_logits(t: &mut Tape, vars: &ParamVars, z: Var, node_type: &str) -> Result<Var> {
    let (w, b) = head_names(node_type);
    let w = vars.get(&w)?;
    let b = vars.get(&b)?;
    let zw = t.matmul(z, w)?;
    t.add_row(zw, b)
}

/// Tape version of [`classification_loss`].
pub fn classification_loss_var(t: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = t.value(logits).cols();
    let mut onehot = Tensor::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[i * classes + y] = 1.0;
    }
    let mask = t.constant(onehot);
    let lsm = t.log_softmax_rows(logits)?;
    let picked = t.mul(lsm, mask)?;
    let s = t.sum(picked)?;
    t.scale(s, -1.0 / labels.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn plain_logits(head: &ParamStore, node_type: &str, z: &Tensor) -> Result<Tensor> {
    let mut t = Tape::new();
    let vars = head.bind(&mut t, |_| false);
    let zv = t.constant(z.clone());
    let l = head_logits(&mut t, &vars, zv, node_type)?;
    Ok(t.value(l).clone())
}

/// Most likely class per row of `z` (embeddings of `node_type` nodes).
pub fn predict(params: &ModelParams, node_type: &str, z: &Tensor) -> Result<Vec<usize>> {
    let logits = plain_logits(&params.store, node_type, z)?;
    Ok((0..logits.rows()).map(|i| argmax(logits.row_slice(i))).collect())
}

fn head_store(params: &ModelParams, node_type: &str) -> Result<ParamStore> {
    let (w, b) = head_names(node_type);
    let mut s = ParamStore::new();
    s.insert(w.clone(), params.store.get(&w)?.clone());
    s.insert(b.clone(), params.store.get(&b)?.clone());
    Ok(s)
}

fn rows_of(z: &Tensor, range: std::ops::Range<usize>) -> Tensor {
    let d = z.cols();
    Tensor::matrix(range.len(), d, z.data()[range.start * d..range.end * d].to_vec())
        .expect("row range within tensor")
}

/// Train a fresh classification head on frozen embeddings.
///
/// Embeddings of every split node are computed once. For each learning
/// rate the head is re-initialized from `seed` and trained full-batch on
/// the mean cross-entropy, keeping the head with the lowest validation
/// loss and stopping after `patience` epochs without improvement. The
/// learning rate with the best validation Micro-F1 is kept (ties go to the
/// lower validation loss).
pub fn finetune(
    g: &HeteroGraph,
    table: &TokenTable,
    mut params: ModelParams,
    split: &NodeSplit,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    let node_type = split.node_type.as_str();
    if g.schema().labels_for(node_type).is_none_or(|c| c.is_empty()) {
        return Err(Error::Split(format!("node type `{node_type}` has no class labels")));
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Split(format!("no labeled `{node_type}` nodes to train on")));
    }
    if cfg.lr_grid.is_empty() {
        return Err(Error::Config("the learning-rate grid is empty".into()));
    }
    let before = params.backbone_hash();
    let classes = split.classes.len();

    let nodes: Vec<NodeIdx> =
        split.train.iter().chain(&split.val).chain(&split.test).map(|x| x.0).collect();
    let (z, _) = embed_nodes(&params, g, table, &nodes, false)?;
    let (n_tr, n_va) = (split.train.len(), split.val.len());
    let z_train = rows_of(&z, 0..n_tr);
    let z_val = rows_of(&z, n_tr..n_tr + n_va);
    let z_test = rows_of(&z, n_tr + n_va..nodes.len());
    let y_train: Vec<usize> = split.train.iter().map(|x| x.1).collect();
    let y_val: Vec<usize> = split.val.iter().map(|x| x.1).collect();

    let mut grid = Vec::new();
    let mut chosen: Option<(GridPoint, ParamStore)> = None;
    for &lr in &cfg.lr_grid {
        params.add_head(node_type, &split.classes, seed)?;
        let mut head = head_store(&params, node_type)?;
        let mut adam = Adam::new(AdamConfig::with_lr(lr));
        let mut best: Option<(usize, f64, ParamStore)> = None;
        let mut epochs_run = 0;
        for epoch in 0..cfg.max_epochs {
            let val_loss = classification_loss(&plain_logits(&head, node_type, &z_val)?, &y_val)?;
            if !val_loss.is_finite() {
                return Err(Error::Diverged { epoch, loss: val_loss });
            }
            if best.as_ref().is_none_or(|b| val_loss < b.1) {
                best = Some((epoch, val_loss, head.clone()));
            }
            let mut t = Tape::new();
            let vars = head.bind(&mut t, |_| true);
            let zv = t.constant(z_train.clone());
            let logits = head_logits(&mut t, &vars, zv, node_type)?;
            let loss = classification_loss_var(&mut t, logits, &y_train)?;
            let grads = t.backward(loss)?;
            adam.step(&mut head, &vars, &grads)?;
            epochs_run = epoch + 1;
            if epoch - best.as_ref().map_or(0, |b| b.0) >= cfg.patience {
                break;
            }
        }
        let (best_epoch, val_loss, head) = best.ok_or_else(|| Error::Config("fine-tuning needs at least one epoch".into()))?;
        let preds: Vec<usize> = {
            let l = plain_logits(&head, node_type, &z_val)?;
            (0..l.rows()).map(|i| argmax(l.row_slice(i))).collect()
        };
        let val_micro_f1 = micro_f1(&preds, &y_val, classes)?;
        let point = GridPoint { lr, best_epoch, epochs_run, val_loss, val_micro_f1 };
        log::info!("lr {lr}: val micro-F1 {val_micro_f1:.4}, val loss {val_loss:.6}, best epoch {best_epoch}");
        let better = chosen.as_ref().is_none_or(|(c, _)| {
            val_micro_f1 > c.val_micro_f1 || (val_micro_f1 == c.val_micro_f1 && val_loss < c.val_loss)
        });
        grid.push(point.clone());
        if better {
            chosen = Some((point, head));
        }
    }
    let (point, head) = chosen.expect("grid is nonempty");
    for (name, t) in head.iter() {
        params.store.insert(name, t.clone());
    }

    let (test_micro_f1, test_macro_f1, test_predictions) = if split.test.is_empty() {
        log::warn!("the test split is empty; reporting zero scores");
        (0.0, 0.0, Vec::new())
    } else {
        let preds = predict(&params, node_type, &z_test)?;
        let golds: Vec<usize> = split.test.iter().map(|x| x.1).collect();
        (
            micro_f1(&preds, &golds, classes)?,
            macro_f1(&preds, &golds, classes)?,
            split.test.iter().zip(&preds).map(|(&(v, y), &p)| (v, p, y)).collect(),
        )
    };
    let after = params.backbone_hash();
    Ok(FinetuneReport {
        params,
        chosen_lr: point.lr,
        grid,
        test_micro_f1,
        test_macro_f1,
        test_predictions,
        backbone_hash_before: before,
        backbone_hash_after: after,
    })
}
