//! Reverse-mode differentiation over a recorded tape of matrix primitives.
//!
//! A [`Graph`] records every primitive applied during a forward pass; node
//! ids are topologically ordered by construction, so the backward pass is a
//! single reverse sweep. Parameters are bound by name from a [`ParamStore`];
//! a bound parameter requires a gradient only if it is trainable in the store
//! and accepted by the graph's filter, which is how training phases select
//! what they update. Gradients are only propagated into nodes that can reach
//! such a parameter (or a differentiable input).

use std::collections::HashMap;

use super::params::{Gradients, ParamStore};
use super::tensor::{matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Normalize each row across its columns.
    Row,
    /// Normalize each column across its rows.
    Col,
}

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Softmax { x: Var, axis: Axis },
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Tensor> },
    CrossEntropy { logits: Var, targets: Vec<(usize, usize)>, probs: Tensor },
    SquaredError { pred: Var, target: Tensor },
    Sum(Var),
    RowSums(Var),
    MeanRows(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::Sigmoid(x)
            | Op::Gelu(x)
            | Op::Sum(x)
            | Op::RowSums(x)
            | Op::MeanRows(x) => vec![*x],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::SliceRows { x, .. } | Op::Softmax { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::SquaredError { pred, .. } => vec![*pred],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients from one backward sweep.
pub struct NodeGrads {
    grads: Vec<Option<Tensor>>,
}

impl NodeGrads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

type ParamFilter<'f> = Box<dyn Fn(&str) -> bool + 'f>;

#[derive(Default)]
pub struct Graph<'f> {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
    filter: Option<ParamFilter<'f>>,
}

fn bcast_index(b: &Tensor, r: usize, c: usize) -> usize {
    bcast_at(b.shape(), r, c)
}

fn bcast_at([rows, cols]: [usize; 2], r: usize, c: usize) -> usize {
    let rr = if rows == 1 { 0 } else { r };
    let cc = if cols == 1 { 0 } else { c };
    rr * cols + cc
}

fn broadcastable(a: &Tensor, b: &Tensor) -> bool {
    (b.rows() == a.rows() || b.rows() == 1) && (b.cols() == a.cols() || b.cols() == 1)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Softmax of `xs` written into `out`.
fn softmax_into(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl<'f> Graph<'f> {
    /// A graph that differentiates every trainable parameter it binds.
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that differentiates only trainable parameters accepted by `filter`.
    pub fn with_filter(filter: impl Fn(&str) -> bool + 'f) -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            filter: Some(Box::new(filter)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked (used for checking input gradients).
    pub fn input_with_grad(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter. Binding the same name twice yields the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let wanted = self.filter.as_ref().is_none_or(|f| f(name));
        self.nodes.push(Node {
            value,
            op: Op::Param,
            requires_grad: store.is_trainable(name) && wanted,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `a + b` where `b` may broadcast along rows and/or columns.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcastable(ta, tb) {
            return Err(Error::shape("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let out = Tensor::from_fn(ta.rows(), ta.cols(), |r, c| {
            ta.get(r, c) + tb.data()[bcast_index(tb, r, c)]
        });
        self.push(out, Op::Add(a, b), "add")
    }

    /// Elementwise `a * b` where `b` may broadcast along rows and/or columns.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcastable(ta, tb) {
            return Err(Error::shape("mul", format!("{:?} * {:?}", ta.shape(), tb.shape())));
        }
        let out = Tensor::from_fn(ta.rows(), ta.cols(), |r, c| {
            ta.get(r, c) * tb.data()[bcast_index(tb, r, c)]
        });
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), "scale")
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = xs.first().map(|&x| self.value(x).rows()).unwrap_or(0);
        if xs.iter().any(|&x| self.value(x).rows() != rows) {
            let shapes: Vec<_> = xs.iter().map(|&x| self.value(x).shape()).collect();
            return Err(Error::shape("concat_cols", format!("{shapes:?}")));
        }
        let cols: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row_slice(r));
            }
        }
        self.push(Tensor::new(rows, cols, data)?, Op::ConcatCols(xs.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = xs.first().map(|&x| self.value(x).cols()).unwrap_or(0);
        if xs.iter().any(|&x| self.value(x).cols() != cols) {
            let shapes: Vec<_> = xs.iter().map(|&x| self.value(x).shape()).collect();
            return Err(Error::shape("concat_rows", format!("{shapes:?}")));
        }
        let rows: usize = xs.iter().map(|&x| self.value(x).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        self.push(Tensor::new(rows, cols, data)?, Op::ConcatRows(xs.to_vec()), "concat_rows")
    }

    /// Embedding lookup: row `ids[r]` of `table` becomes output row `r`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::IdOutOfRange {
                what: "embedding table",
                id: bad,
                size: t.rows(),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new(ids.len(), t.cols(), data)?;
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            "gather",
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {:?}", start + len, t.shape()),
            ));
        }
        let data = t.data()[start * t.cols()..(start + len) * t.cols()].to_vec();
        let out = Tensor::new(len, t.cols(), data)?;
        self.push(out, Op::SliceRows { x, start }, "slice_rows")
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x);
        if rows * cols != t.len() {
            return Err(Error::shape("reshape", format!("{:?} -> [{rows}, {cols}]", t.shape())));
        }
        let out = Tensor::new(rows, cols, t.data().to_vec())?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let t = self.value(x);
        let out = match axis {
            Axis::Row => {
                let mut out = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    softmax_into(t.row_slice(r), out.row_slice_mut(r));
                }
                out
            }
            Axis::Col => {
                let tt = t.transpose();
                let mut out = Tensor::zeros(tt.rows(), tt.cols());
                for r in 0..tt.rows() {
                    softmax_into(tt.row_slice(r), out.row_slice_mut(r));
                }
                out.transpose()
            }
        };
        self.push(out, Op::Softmax { x, axis }, "softmax")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), "sigmoid")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), "gelu")
    }

    /// Per-row normalization followed by a `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (t, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let d = t.cols();
        if g.shape() != [1, d] || b.shape() != [1, d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", t.shape(), g.shape(), b.shape()),
            ));
        }
        let mut xhat = Tensor::zeros(t.rows(), d);
        let mut rstd = Vec::with_capacity(t.rows());
        let mut out = Tensor::zeros(t.rows(), d);
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            let xh = xhat.row_slice_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
            let o = out.row_slice_mut(r);
            for c in 0..d {
                o[c] = xh[c] * g.data()[c] + b.data()[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Multi-head scaled dot-product attention where row `t` attends only to
    /// rows `<= t`. `q`, `k`, `v` are `n x d` with `d` divisible by `heads`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let [n, d] = tq.shape();
        if tk.shape() != [n, d] || tv.shape() != [n, d] || heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "causal_attention",
                format!("q {:?}, k {:?}, v {:?}, heads {heads}", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Tensor::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        let mut scores = vec![0.0; n];
        for h in 0..heads {
            let off = h * hd;
            let mut p = Tensor::zeros(n, n);
            for i in 0..n {
                let qi = &tq.row_slice(i)[off..off + hd];
                for j in 0..=i {
                    let kj = &tk.row_slice(j)[off..off + hd];
                    scores[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_into(&scores[..=i], &mut p.row_slice_mut(i)[..=i]);
                let o = &mut out.row_slice_mut(i)[off..off + hd];
                for j in 0..=i {
                    let w = p.get(i, j);
                    let vj = &tv.row_slice(j)[off..off + hd];
                    for (oc, vc) in o.iter_mut().zip(vj) {
                        *oc += w * vc;
                    }
                }
            }
            probs.push(p);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            "causal_attention",
        )
    }

    /// Sum over `(row, class)` targets of `-log softmax(logits[row])[class]`.
    /// A row may carry several targets; they share that row's softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(logits);
        for &(r, c) in targets {
            if r >= t.rows() {
                return Err(Error::IdOutOfRange {
                    what: "logit rows",
                    id: r,
                    size: t.rows(),
                });
            }
            if c >= t.cols() {
                return Err(Error::IdOutOfRange {
                    what: "classes",
                    id: c,
                    size: t.cols(),
                });
            }
        }
        let mut probs = Tensor::zeros(t.rows(), t.cols());
        for r in 0..t.rows() {
            softmax_into(t.row_slice(r), probs.row_slice_mut(r));
        }
        let mut loss = 0.0;
        for &(r, c) in targets {
            let row = t.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[c];
        }
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// `sum((target - pred)^2)` against a constant target.
    pub fn squared_error(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "squared_error",
                format!("pred {:?}, target {:?}", p.shape(), target.shape()),
            ));
        }
        let loss: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (b - a) * (b - a))
            .sum();
        self.push(Tensor::scalar(loss), Op::SquaredError { pred, target }, "squared_error")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// `n x m -> n x 1` row sums.
    pub fn row_sums(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let out = Tensor::new(t.rows(), 1, data)?;
        self.push(out, Op::RowSums(x), "row_sums")
    }

    /// `n x m -> 1 x m` column means.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.rows().max(1) as f64;
        let out = Tensor::from_fn(1, t.cols(), |_, c| (0..t.rows()).map(|r| t.get(r, c)).sum::<f64>() / n);
        self.push(out, Op::MeanRows(x), "mean_rows")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<NodeGrads> {
        let lt = self.value(loss);
        if lt.shape() != [1, 1] {
            return Err(Error::NonScalarLoss(lt.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(NodeGrads { grads })
    }

    /// Gradients of `loss` for every differentiable parameter bound in this
    /// graph; parameters the loss does not reach get zeros.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let node_grads = self.backward(loss)?;
        Ok(self.param_gradients(&node_grads))
    }

    pub fn param_gradients(&self, node_grads: &NodeGrads) -> Gradients {
        let mut out = Gradients::new();
        for (name, &v) in &self.bound {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            let g = node_grads.wrt(v).cloned().unwrap_or_else(|| {
                let [r, c] = self.value(v).shape();
                Tensor::zeros(r, c)
            });
            out.insert(name.clone(), g);
        }
        out
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        // Lazily-created gradient buffer for an input that needs one.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let [r, c] = self.nodes[v.0].value.shape();
                    Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c)))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = buf!(*a) {
                    matmul_bt_acc(g, tb, ga);
                }
                if let Some(gb) = buf!(*b) {
                    matmul_at_acc(ta, g, gb);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = buf!(*a) {
                    ga.add_assign(g);
                }
                let tb_shape = self.value(*b).shape();
                if let Some(gb) = buf!(*b) {
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            gb.data_mut()[bcast_at(tb_shape, r, c)] += g.get(r, c);
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = buf!(*a) {
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            ga.data_mut()[r * g.cols() + c] += g.get(r, c) * tb.data()[bcast_index(tb, r, c)];
                        }
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            gb.data_mut()[bcast_index(tb, r, c)] += g.get(r, c) * ta.get(r, c);
                        }
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = buf!(*x) {
                    gx.add_scaled(g, *f);
                }
            }
            Op::ConcatCols(xs) => {
                let mut off = 0;
                for &x in xs {
                    let w = self.value(x).cols();
                    if let Some(gx) = buf!(x) {
                        for r in 0..g.rows() {
                            let src = &g.row_slice(r)[off..off + w];
                            for (d, s) in gx.row_slice_mut(r).iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    if let Some(gx) = buf!(x) {
                        for (d, s) in gx.data_mut().iter_mut().zip(&g.data()[off..off + len]) {
                            *d += s;
                        }
                    }
                    off += len;
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = buf!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, s) in gt.row_slice_mut(id).iter_mut().zip(g.row_slice(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let cols = g.cols();
                if let Some(gx) = buf!(*x) {
                    let dst = &mut gx.data_mut()[start * cols..start * cols + g.len()];
                    for (d, s) in dst.iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = buf!(*x) {
                    for (d, s) in gx.data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                if let Some(gx) = buf!(*x) {
                    match axis {
                        Axis::Row => {
                            for r in 0..y.rows() {
                                let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                                for (c, d) in gx.row_slice_mut(r).iter_mut().enumerate() {
                                    *d += yr[c] * (gr[c] - dot);
                                }
                            }
                        }
                        Axis::Col => {
                            for c in 0..y.cols() {
                                let dot: f64 = (0..y.rows()).map(|r| y.get(r, c) * g.get(r, c)).sum();
                                for r in 0..y.rows() {
                                    gx.data_mut()[r * y.cols() + c] += y.get(r, c) * (g.get(r, c) - dot);
                                }
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                if let Some(gx) = buf!(*x) {
                    for ((d, &yv), &gv) in gx.data_mut().iter_mut().zip(y.data()).zip(g.data()) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                if let Some(gx) = buf!(*x) {
                    for ((d, &xv), &gv) in gx.data_mut().iter_mut().zip(tx.data()).zip(g.data()) {
                        *d += gv * gelu_grad(xv);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gain_t = self.value(*gain);
                let d = xhat.cols();
                if let Some(gg) = buf!(*gain) {
                    for r in 0..g.rows() {
                        for c in 0..d {
                            gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                }
                if let Some(gb) = buf!(*bias) {
                    for r in 0..g.rows() {
                        for c in 0..d {
                            gb.data_mut()[c] += g.get(r, c);
                        }
                    }
                }
                if let Some(gx) = buf!(*x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..g.rows() {
                        for c in 0..d {
                            dxhat[c] = g.get(r, c) * gain_t.data()[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let xh = xhat.row_slice(r);
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let out = gx.row_slice_mut(r);
                        for c in 0..d {
                            out[c] += rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *heads, probs, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let s = g.item();
                if let Some(gl) = buf!(*logits) {
                    for &(r, c) in targets {
                        for (d, p) in gl.row_slice_mut(r).iter_mut().zip(probs.row_slice(r)) {
                            *d += s * p;
                        }
                        gl.data_mut()[r * probs.cols() + c] -= s;
                    }
                }
            }
            Op::SquaredError { pred, target } => {
                let s = g.item();
                let tp = self.value(*pred);
                if let Some(gp) = buf!(*pred) {
                    for ((d, &p), &t) in gp.data_mut().iter_mut().zip(tp.data()).zip(target.data()) {
                        *d += -2.0 * (t - p) * s;
                    }
                }
            }
            Op::Sum(x) => {
                let s = g.item();
                if let Some(gx) = buf!(*x) {
                    gx.data_mut().iter_mut().for_each(|d| *d += s);
                }
            }
            Op::RowSums(x) => {
                if let Some(gx) = buf!(*x) {
                    for r in 0..g.rows() {
                        let s = g.get(r, 0);
                        gx.row_slice_mut(r).iter_mut().for_each(|d| *d += s);
                    }
                }
            }
            Op::MeanRows(x) => {
                let n = self.value(*x).rows().max(1) as f64;
                if let Some(gx) = buf!(*x) {
                    for r in 0..gx.rows() {
                        for (d, s) in gx.row_slice_mut(r).iter_mut().zip(g.data()) {
                            *d += s / n;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[Tensor],
        grads: &mut [Option<Tensor>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let [n, d] = tq.shape();
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let need = |x: Var| self.nodes[x.0].requires_grad;
        let mut gq = need(q).then(|| Tensor::zeros(n, d));
        let mut gk = need(k).then(|| Tensor::zeros(n, d));
        let mut gv = need(v).then(|| Tensor::zeros(n, d));
        let mut dp = vec![0.0; n];
        for (h, p) in probs.iter().enumerate() {
            let off = h * hd;
            for i in 0..n {
                let go = &g.row_slice(i)[off..off + hd];
                for j in 0..=i {
                    let vj = &tv.row_slice(j)[off..off + hd];
                    dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                }
                let dot: f64 = (0..=i).map(|j| p.get(i, j) * dp[j]).sum();
                for j in 0..=i {
                    let pij = p.get(i, j);
                    if let Some(gv) = gv.as_mut() {
                        for (dst, s) in gv.row_slice_mut(j)[off..off + hd].iter_mut().zip(go) {
                            *dst += pij * s;
                        }
                    }
                    let ds = pij * (dp[j] - dot) * scale;
                    if let Some(gq) = gq.as_mut() {
                        let kj = &tk.row_slice(j)[off..off + hd];
                        for (dst, s) in gq.row_slice_mut(i)[off..off + hd].iter_mut().zip(kj) {
                            *dst += ds * s;
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        let qi = &tq.row_slice(i)[off..off + hd];
                        for (dst, s) in gk.row_slice_mut(j)[off..off + hd].iter_mut().zip(qi) {
                            *dst += ds * s;
                        }
                    }
                }
            }
        }
        for (x, gx) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(gx) = gx {
                match grads[x.0].as_mut() {
                    Some(acc) => acc.add_assign(&gx),
                    None => grads[x.0] = Some(gx),
                }
            }
        }
    }
}
