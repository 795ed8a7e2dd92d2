//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the
//! operation that produced it. [`Tape::backward`] walks the tape in reverse
//! and applies each operation's backward rule.

use std::ops::Range;
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `m x n` plus a broadcast `1 x n` row.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `m x n` times a broadcast `1 x n` row, elementwise.
    MulRow(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SelectRows(Var, Vec<usize>),
    Transpose(Var),
    MeanRows(Var),
    Sum(Var),
    SumCols(Var),
    LayerNorm(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    /// `m x n` times a broadcast `m x 1` column, elementwise.
    MulCol(Var, Var),
    SegmentSoftmax(Var, Segments),
    SegmentSum(Var, Segments),
    SegmentAttention { q: Var, k: Var, v: Var, segs: Segments, heads: usize },
}

/// Contiguous row ranges, one per sequence.
pub type Segments = Arc<Vec<Range<usize>>>;

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every tape node that requires one.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape().len() == 2 {
        Ok(())
    } else {
        Err(Error::Shape { op, lhs: t.shape().to_vec(), rhs: vec![] })
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&x| f(x)).collect() }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a.data[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    Tensor { shape: vec![m, n], data: out }
}

fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor { shape: vec![n, m], data: out }
}

/// `a^T b` without materializing the transpose.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b.data[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a.data[i * k + p];
            if x == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    Tensor { shape: vec![k, n], data: out }
}

/// `a b^T` without materializing the transpose.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor { shape: vec![m, n], data: out }
}

fn col_sums(t: &Tensor) -> Tensor {
    let (m, n) = (t.rows(), t.cols());
    let mut out = vec![0.0; n];
    for i in 0..m {
        for (o, x) in out.iter_mut().zip(&t.data[i * n..(i + 1) * n]) {
            *o += x;
        }
    }
    Tensor::row(out)
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node from index `len` on. Vars at or past `len` become
    /// invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn parents(op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::Scale(a, _)
            | Op::SliceCols(a, ..)
            | Op::SelectRows(a, _)
            | Op::Transpose(a)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::SumCols(a)
            | Op::LayerNorm(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Log(a)
            | Op::Clamp(a, ..)
            | Op::SegmentSoftmax(a, _)
            | Op::SegmentSum(a, _) => vec![*a],
            Op::MulCol(a, c) => vec![*a, *c],
            Op::SegmentAttention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        let requires_grad = Self::parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Forward rule of `op` given the current values of its parents.
    fn eval(&self, op: &Op) -> Result<Tensor> {
        let val = |v: &Var| &self.nodes[v.0].value;
        Ok(match op {
            Op::Leaf => unreachable!("leaves carry their own value"),
            Op::MatMul(a, b) => {
                let (a, b) = (val(a), val(b));
                require_rank2("matmul", a)?;
                require_rank2("matmul", b)?;
                if a.cols() != b.rows() {
                    return Err(shape_err("matmul", a, b));
                }
                matmul(a, b)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (x, y) = (val(a), val(b));
                if x.shape() != y.shape() {
                    let name = match op {
                        Op::Add(..) => "add",
                        Op::Sub(..) => "sub",
                        _ => "mul",
                    };
                    return Err(shape_err(name, x, y));
                }
                match op {
                    Op::Add(..) => zip(x, y, |p, q| p + q),
                    Op::Sub(..) => zip(x, y, |p, q| p - q),
                    _ => zip(x, y, |p, q| p * q),
                }
            }
            Op::AddRow(a, b) | Op::MulRow(a, b) => {
                let (x, r) = (val(a), val(b));
                require_rank2("broadcast", x)?;
                if r.rows() != 1 || r.cols() != x.cols() {
                    return Err(shape_err("row broadcast", x, r));
                }
                let n = x.cols();
                let add = matches!(op, Op::AddRow(..));
                Tensor {
                    shape: x.shape.clone(),
                    data: x
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| if add { v + r.data[i % n] } else { v * r.data[i % n] })
                        .collect(),
                }
            }
            Op::Scale(a, c) => map(val(a), |x| x * c),
            Op::ConcatRows(vs) => {
                let first = val(vs.first().ok_or_else(|| empty_concat("concat_rows"))?);
                let cols = first.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for v in vs {
                    let t = val(v);
                    require_rank2("concat_rows", t)?;
                    if t.cols() != cols {
                        return Err(shape_err("concat_rows", first, t));
                    }
                    rows += t.rows();
                    data.extend_from_slice(&t.data);
                }
                Tensor { shape: vec![rows, cols], data }
            }
            Op::ConcatCols(vs) => {
                let first = val(vs.first().ok_or_else(|| empty_concat("concat_cols"))?);
                let rows = first.rows();
                for v in vs {
                    let t = val(v);
                    require_rank2("concat_cols", t)?;
                    if t.rows() != rows {
                        return Err(shape_err("concat_cols", first, t));
                    }
                }
                let cols: usize = vs.iter().map(|v| val(v).cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    for v in vs {
                        data.extend_from_slice(val(v).row_slice(i));
                    }
                }
                Tensor { shape: vec![rows, cols], data }
            }
            Op::SliceCols(a, start, end) => {
                let x = val(a);
                if start >= end || *end > x.cols() {
                    return Err(Error::Shape {
                        op: "slice_cols",
                        lhs: x.shape().to_vec(),
                        rhs: vec![*start, *end],
                    });
                }
                let mut data = Vec::with_capacity(x.rows() * (end - start));
                for i in 0..x.rows() {
                    data.extend_from_slice(&x.row_slice(i)[*start..*end]);
                }
                Tensor { shape: vec![x.rows(), end - start], data }
            }
            Op::SelectRows(a, idx) => {
                let x = val(a);
                if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
                    return Err(Error::Shape {
                        op: "select_rows",
                        lhs: x.shape().to_vec(),
                        rhs: vec![bad],
                    });
                }
                let mut data = Vec::with_capacity(idx.len() * x.cols());
                for &i in idx {
                    data.extend_from_slice(x.row_slice(i));
                }
                Tensor { shape: vec![idx.len(), x.cols()], data }
            }
            Op::Transpose(a) => {
                require_rank2("transpose", val(a))?;
                transpose(val(a))
            }
            Op::MeanRows(a) => {
                let x = val(a);
                let mut t = col_sums(x);
                let m = x.rows() as f64;
                t.data.iter_mut().for_each(|v| *v /= m);
                t
            }
            Op::Sum(a) => Tensor::scalar(val(a).data.iter().sum()),
            Op::SumCols(a) => {
                let x = val(a);
                Tensor {
                    shape: vec![x.rows(), 1],
                    data: (0..x.rows()).map(|i| x.row_slice(i).iter().sum()).collect(),
                }
            }
            Op::LayerNorm(a) => {
                let x = val(a);
                let mut out = x.clone();
                let n = x.cols();
                for i in 0..x.rows() {
                    let (mean, inv) = row_stats(x.row_slice(i));
                    for o in &mut out.data[i * n..(i + 1) * n] {
                        *o = (*o - mean) * inv;
                    }
                }
                out
            }
            Op::Softmax(a) | Op::LogSoftmax(a) => {
                let x = val(a);
                let n = x.cols();
                let mut out = x.clone();
                for i in 0..x.rows() {
                    softmax_row(x.row_slice(i), &mut out.data[i * n..(i + 1) * n]);
                }
                if matches!(op, Op::LogSoftmax(_)) {
                    // log-sum-exp form keeps large negative entries finite
                    for i in 0..x.rows() {
                        let row = x.row_slice(i);
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                        for (o, &v) in out.data[i * n..(i + 1) * n].iter_mut().zip(row) {
                            *o = v - lse;
                        }
                    }
                }
                out
            }
            Op::Sigmoid(a) => map(val(a), sigmoid),
            Op::Relu(a) => map(val(a), |x| x.max(0.0)),
            Op::Log(a) => map(val(a), f64::ln),
            Op::Clamp(a, lo, hi) => map(val(a), |x| x.clamp(*lo, *hi)),
            Op::MulCol(a, c) => {
                let (x, col) = (val(a), val(c));
                require_rank2("mul_col", x)?;
                if col.cols() != 1 || col.rows() != x.rows() {
                    return Err(shape_err("mul_col", x, col));
                }
                let n = x.cols();
                Tensor {
                    shape: x.shape.clone(),
                    data: x.data.iter().enumerate().map(|(i, v)| v * col.data[i / n]).collect(),
                }
            }
            Op::SegmentSoftmax(a, segs) => {
                let x = val(a);
                check_segments("segment_softmax", x, segs)?;
                if x.cols() != 1 {
                    return Err(Error::Shape { op: "segment_softmax", lhs: x.shape().to_vec(), rhs: vec![x.rows(), 1] });
                }
                let mut out = x.clone();
                for r in segs.iter() {
                    softmax_row(&x.data[r.clone()], &mut out.data[r.clone()]);
                }
                out
            }
            Op::SegmentSum(a, segs) => {
                let x = val(a);
                check_segments("segment_sum", x, segs)?;
                let n = x.cols();
                let mut out = Tensor::zeros(segs.len(), n);
                for (s, r) in segs.iter().enumerate() {
                    for i in r.clone() {
                        for (o, v) in out.data[s * n..(s + 1) * n].iter_mut().zip(x.row_slice(i)) {
                            *o += v;
                        }
                    }
                }
                out
            }
            Op::SegmentAttention { q, k, v, segs, heads } => {
                let (q, k, v) = (val(q), val(k), val(v));
                if q.shape() != k.shape() || q.shape() != v.shape() {
                    return Err(shape_err("segment_attention", q, k));
                }
                check_segments("segment_attention", q, segs)?;
                if *heads == 0 || q.cols() % heads != 0 {
                    return Err(Error::Shape { op: "segment_attention", lhs: q.shape().to_vec(), rhs: vec![*heads] });
                }
                let mut out = Tensor::zeros(q.rows(), q.cols());
                for_each_head(q, k, segs, *heads, |r, cols, p| {
                    let n = r.len();
                    let d = q.cols();
                    for i in 0..n {
                        for j in 0..n {
                            let w = p[i * n + j];
                            for c in cols.clone() {
                                out.data[(r.start + i) * d + c] += w * v.data[(r.start + j) * d + c];
                            }
                        }
                    }
                });
                out
            }
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }

    pub fn concat_rows(&mut self, vs: &[Var]) -> Result<Var> {
        if vs.len() == 1 {
            return Ok(vs[0]);
        }
        self.push(Op::ConcatRows(vs.to_vec()))
    }

    pub fn concat_cols(&mut self, vs: &[Var]) -> Result<Var> {
        if vs.len() == 1 {
            return Ok(vs[0]);
        }
        self.push(Op::ConcatCols(vs.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceCols(a, start, end))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SelectRows(a, (start..end).collect()))
    }

    /// Gather rows by index (rows may repeat); the embedding lookup.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.push(Op::SelectRows(a, idx.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    /// Column means: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    /// Row sums: `m x n -> m x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumCols(a))
    }

    /// Row-wise normalization to zero mean and unit variance, no affine.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LayerNorm(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSoftmax(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.push(Op::Clamp(a, lo, hi))
    }

    /// Multiply row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.push(Op::MulCol(a, col))
    }

    /// Softmax of an `m x 1` column within each segment.
    pub fn segment_softmax(&mut self, a: Var, segs: &Segments) -> Result<Var> {
        self.push(Op::SegmentSoftmax(a, segs.clone()))
    }

    /// Row `s` of the result is the sum of rows `segs[s]` of `a` (zero when
    /// the segment is empty).
    pub fn segment_sum(&mut self, a: Var, segs: &Segments) -> Result<Var> {
        self.push(Op::SegmentSum(a, segs.clone()))
    }

    /// Multi-head scaled dot-product self-attention restricted to each
    /// segment. Head `h` uses columns `h*dk..(h+1)*dk` of `q`, `k` and `v`;
    /// head outputs land in the same columns.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segs: &Segments,
        heads: usize,
    ) -> Result<Var> {
        self.push(Op::SegmentAttention { q, k, v, segs: segs.clone(), heads })
    }

    /// Every probability vector produced on the tape: softmax rows, segment
    /// softmax segments and attention-weight rows.
    pub fn distributions(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Softmax(_) => {
                    out.extend((0..n.value.rows()).map(|i| n.value.row_slice(i).to_vec()))
                }
                Op::SegmentSoftmax(_, segs) => {
                    out.extend(segs.iter().filter(|r| !r.is_empty()).map(|r| n.value.data[r.clone()].to_vec()))
                }
                Op::SegmentAttention { q, k, segs, heads, .. } => {
                    for_each_head(self.value(*q), self.value(*k), segs, *heads, |r, _, p| {
                        out.extend(p.chunks(r.len()).map(<[f64]>::to_vec));
                    });
                }
                _ => {}
            }
        }
        out
    }

    /// Recompute every non-leaf value from the leaves in tape order.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut fresh = Tape { nodes: Vec::with_capacity(self.nodes.len()) };
        for n in &self.nodes {
            let value = match n.op {
                Op::Leaf => n.value.clone(),
                ref op => fresh.eval(op)?,
            };
            fresh.nodes.push(Node { value, op: n.op.clone(), requires_grad: n.requires_grad });
        }
        Ok(fresh.nodes.into_iter().map(|n| n.value).collect())
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }

    /// Gradients of the `1 x 1` node `loss` with respect to all nodes.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Shape { op: "backward", lhs: lv.shape().to_vec(), rhs: vec![1, 1] });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor { shape: lv.shape.clone(), data: vec![1.0] });
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data.iter_mut().zip(&d.data) {
                        *e += x;
                    }
                }
                slot => *slot = Some(d),
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    acc(*a, matmul_nt(g, val(b)));
                }
                if self.requires_grad(*b) {
                    acc(*b, matmul_tn(val(a), g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, map(g, |x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, zip(g, val(b), |p, q| p * q));
                acc(*b, zip(g, val(a), |p, q| p * q));
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                acc(*r, col_sums(g));
            }
            Op::MulRow(a, r) => {
                let (x, row) = (val(a), val(r));
                let n = x.cols();
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().enumerate().map(|(i, d)| d * row.data[i % n]).collect(),
                };
                acc(*a, da);
                acc(*r, col_sums(&zip(g, x, |p, q| p * q)));
            }
            Op::Scale(a, c) => acc(*a, map(g, |x| x * c)),
            Op::ConcatRows(vs) => {
                let cols = g.cols();
                let mut offset = 0;
                for v in vs {
                    let rows = val(v).rows();
                    let data = g.data[offset * cols..(offset + rows) * cols].to_vec();
                    acc(*v, Tensor { shape: vec![rows, cols], data });
                    offset += rows;
                }
            }
            Op::ConcatCols(vs) => {
                let mut offset = 0;
                for v in vs {
                    let cols = val(v).cols();
                    let mut data = Vec::with_capacity(g.rows() * cols);
                    for i in 0..g.rows() {
                        data.extend_from_slice(&g.row_slice(i)[offset..offset + cols]);
                    }
                    acc(*v, Tensor { shape: vec![g.rows(), cols], data });
                    offset += cols;
                }
            }
            Op::SliceCols(a, start, end) => {
                let x = val(a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                let n = x.cols();
                for i in 0..x.rows() {
                    d.data[i * n + start..i * n + end].copy_from_slice(g.row_slice(i));
                }
                acc(*a, d);
            }
            Op::SelectRows(a, idx) => {
                let x = val(a);
                let n = x.cols();
                let mut d = Tensor::zeros(x.rows(), n);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in d.data[i * n..(i + 1) * n].iter_mut().zip(g.row_slice(k)) {
                        *o += v;
                    }
                }
                acc(*a, d);
            }
            Op::Transpose(a) => acc(*a, transpose(g)),
            Op::MeanRows(a) => {
                let x = val(a);
                let m = x.rows() as f64;
                let n = x.cols();
                let d = Tensor {
                    shape: x.shape.clone(),
                    data: (0..x.numel()).map(|i| g.data[i % n] / m).collect(),
                };
                acc(*a, d);
            }
            Op::Sum(a) => {
                let x = val(a);
                acc(*a, Tensor { shape: x.shape.clone(), data: vec![g.data[0]; x.numel()] });
            }
            Op::SumCols(a) => {
                let x = val(a);
                let n = x.cols();
                let d = Tensor {
                    shape: x.shape.clone(),
                    data: (0..x.numel()).map(|i| g.data[i / n]).collect(),
                };
                acc(*a, d);
            }
            Op::LayerNorm(a) => {
                let x = val(a);
                let n = x.cols();
                let nf = n as f64;
                let mut d = Tensor::zeros(x.rows(), n);
                for i in 0..x.rows() {
                    let (_, inv) = row_stats(x.row_slice(i));
                    let y = out.row_slice(i);
                    let dy = g.row_slice(i);
                    let mean_dy = dy.iter().sum::<f64>() / nf;
                    let mean_dyy = dy.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / nf;
                    for j in 0..n {
                        d.data[i * n + j] = inv * (dy[j] - mean_dy - y[j] * mean_dyy);
                    }
                }
                acc(*a, d);
            }
            Op::Softmax(a) => {
                let n = out.cols();
                let mut d = Tensor::zeros(out.rows(), n);
                for i in 0..out.rows() {
                    let y = out.row_slice(i);
                    let dy = g.row_slice(i);
                    let dot: f64 = y.iter().zip(dy).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        d.data[i * n + j] = y[j] * (dy[j] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LogSoftmax(a) => {
                let n = out.cols();
                let mut d = Tensor::zeros(out.rows(), n);
                for i in 0..out.rows() {
                    let y = out.row_slice(i);
                    let dy = g.row_slice(i);
                    let total: f64 = dy.iter().sum();
                    for j in 0..n {
                        d.data[i * n + j] = dy[j] - y[j].exp() * total;
                    }
                }
                acc(*a, d);
            }
            Op::Sigmoid(a) => acc(*a, zip(g, out, |d, s| d * s * (1.0 - s))),
            Op::Relu(a) => acc(*a, zip(g, val(a), |d, x| if x > 0.0 { d } else { 0.0 })),
            Op::Log(a) => acc(*a, zip(g, val(a), |d, x| d / x)),
            Op::Clamp(a, lo, hi) => {
                acc(*a, zip(g, val(a), |d, x| if x >= *lo && x <= *hi { d } else { 0.0 }))
            }
            Op::MulCol(a, c) => {
                let (x, col) = (val(a), val(c));
                let n = x.cols();
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().enumerate().map(|(i, d)| d * col.data[i / n]).collect(),
                };
                acc(*a, da);
                let prod = zip(g, x, |p, q| p * q);
                let dc = Tensor {
                    shape: col.shape.clone(),
                    data: (0..x.rows()).map(|i| prod.row_slice(i).iter().sum()).collect(),
                };
                acc(*c, dc);
            }
            Op::SegmentSoftmax(a, segs) => {
                let mut d = Tensor::zeros(out.rows(), 1);
                for r in segs.iter() {
                    let y = &out.data[r.clone()];
                    let dy = &g.data[r.clone()];
                    let dot: f64 = y.iter().zip(dy).map(|(p, q)| p * q).sum();
                    for (j, i) in r.clone().enumerate() {
                        d.data[i] = y[j] * (dy[j] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::SegmentSum(a, segs) => {
                let x = val(a);
                let n = x.cols();
                let mut d = Tensor::zeros(x.rows(), n);
                for (s, r) in segs.iter().enumerate() {
                    for i in r.clone() {
                        d.data[i * n..(i + 1) * n].copy_from_slice(g.row_slice(s));
                    }
                }
                acc(*a, d);
            }
            Op::SegmentAttention { q, k, v, segs, heads } => {
                let (qt, kt, vt) = (val(q), val(k), val(v));
                let d = qt.cols();
                let scale = 1.0 / ((d / heads) as f64).sqrt();
                let mut dq = Tensor::zeros(qt.rows(), d);
                let mut dk = Tensor::zeros(qt.rows(), d);
                let mut dv = Tensor::zeros(qt.rows(), d);
                for_each_head(qt, kt, segs, *heads, |r, cols, p| {
                    let n = r.len();
                    let at = |t: &Tensor, i: usize, c: usize| t.data[(r.start + i) * d + c];
                    // dP = dO V^T, dV = P^T dO
                    let mut dp = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..n {
                            let mut acc_dp = 0.0;
                            for c in cols.clone() {
                                acc_dp += at(g, i, c) * at(vt, j, c);
                                dv.data[(r.start + j) * d + c] += p[i * n + j] * at(g, i, c);
                            }
                            dp[i * n + j] = acc_dp;
                        }
                    }
                    // dS = P * (dP - rowsum(dP * P)), then through the scaled QK^T
                    for i in 0..n {
                        let dot: f64 = (0..n).map(|j| dp[i * n + j] * p[i * n + j]).sum();
                        for j in 0..n {
                            let ds = p[i * n + j] * (dp[i * n + j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in cols.clone() {
                                dq.data[(r.start + i) * d + c] += ds * at(kt, j, c);
                                dk.data[(r.start + j) * d + c] += ds * at(qt, i, c);
                            }
                        }
                    }
                });
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
        }
    }
}

fn check_segments(op: &'static str, x: &Tensor, segs: &[Range<usize>]) -> Result<()> {
    require_rank2(op, x)?;
    match segs.iter().find(|r| r.start > r.end || r.end > x.rows()) {
        Some(r) => Err(Error::Shape { op, lhs: x.shape().to_vec(), rhs: vec![r.start, r.end] }),
        None => Ok(()),
    }
}

/// Calls `f(segment, head columns, probs)` for every nonempty segment and
/// head, where `probs` is the row-major `n x n` attention matrix
/// `softmax(Q K^T / sqrt(dk))` of that head.
fn for_each_head(
    q: &Tensor,
    k: &Tensor,
    segs: &[Range<usize>],
    heads: usize,
    mut f: impl FnMut(&Range<usize>, Range<usize>, &[f64]),
) {
    let d = q.cols();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut scores = Vec::new();
    let mut probs = Vec::new();
    for r in segs.iter().filter(|r| !r.is_empty()) {
        let n = r.len();
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            scores.clear();
            for i in r.clone() {
                let qi = &q.data[i * d + cols.start..i * d + cols.end];
                for j in r.clone() {
                    let kj = &k.data[j * d + cols.start..j * d + cols.end];
                    scores.push(qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale);
                }
            }
            probs.resize(n * n, 0.0);
            for i in 0..n {
                softmax_row(&scores[i * n..(i + 1) * n], &mut probs[i * n..(i + 1) * n]);
            }
            f(r, cols, &probs);
        }
    }
}

fn empty_concat(op: &'static str) -> Error {
    Error::Shape { op, lhs: vec![], rhs: vec![] }
}
