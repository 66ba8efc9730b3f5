//! Dense 2-D tensors and a reverse-mode gradient tape.
//!
//! Every value is a row-major `f64` matrix; scalars are `[1, 1]`, row
//! vectors `[1, n]`, batches `[rows, cols]`. A [`Graph`] records ops as
//! they execute and [`Graph::backward`] walks the tape in reverse to
//! accumulate gradients for every parameter leaf. Non-finite values
//! poison the graph: the first offending op is remembered and surfaces
//! as an error when gradients are requested.

use std::collections::BTreeMap;
use thiserror::Error;

pub mod dist;
pub mod nets;
pub mod optim;

pub use dist::{CatDist, GaussDist};
pub use nets::{GruEncoder, Mlp, Norm};
pub use optim::{DualVariable, OptVariant, ParamSet};

/// Probability floor used wherever a log of an externally supplied
/// probability is taken.
pub const EPS_P: f64 = 1e-8;
/// Log-variance clamp range applied to every Gaussian head.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 4.0;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("backward root must be a scalar, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("non-finite gradient for {0}")]
    NonFiniteGrad(String),
    #[error("non-finite dual update input")]
    NonFiniteDual,
}

// ── Tensor ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length");
        Tensor { rows, cols, data }
    }

    /// One observation per row.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows on empty slice");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor { rows: rows.len(), cols, data }
    }

    pub fn row_vec(data: Vec<f64>) -> Self {
        Tensor { rows: 1, cols: data.len(), data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

// Shared kernels; the graph ops and the plain (no-tape) network
// forwards both call these so the two paths stay bit-identical.
pub mod kernel {
    use super::Tensor;

    pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.cols, b.rows, "matmul inner dim");
        let mut out = Tensor::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            let arow = &a.data[i * a.cols..(i + 1) * a.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (k, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[k * b.cols..(k + 1) * b.cols];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
        out
    }

    pub fn add_row(a: &Tensor, r: &Tensor) -> Tensor {
        assert_eq!(r.rows, 1);
        assert_eq!(a.cols, r.cols, "add_row width");
        let mut out = a.clone();
        for i in 0..a.rows {
            for c in 0..a.cols {
                out.data[i * a.cols + c] += r.data[c];
            }
        }
        out
    }

    pub fn leaky_relu(a: &Tensor, slope: f64) -> Tensor {
        let mut out = a.clone();
        for v in &mut out.data {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        out
    }

    pub fn tanh(a: &Tensor) -> Tensor {
        let mut out = a.clone();
        for v in &mut out.data {
            *v = v.tanh();
        }
        out
    }

    pub fn sigmoid(a: &Tensor) -> Tensor {
        let mut out = a.clone();
        for v in &mut out.data {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        out
    }

    pub fn clamp(a: &Tensor, lo: f64, hi: f64) -> Tensor {
        let mut out = a.clone();
        for v in &mut out.data {
            *v = v.clamp(lo, hi);
        }
        out
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
        let rows = parts[0].rows;
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for p in parts {
                assert_eq!(p.rows, rows, "concat_cols rows");
                out.data[r * cols + at..r * cols + at + p.cols].copy_from_slice(p.row(r));
                at += p.cols;
            }
        }
        out
    }
}

// ── Graph ───────────────────────────────────────────────────────────

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Min(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    SubCol(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Softplus(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    MeanRows(NodeId),
    LogSumExpRows(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    TakePerRow(NodeId, Vec<usize>),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients produced by one backward pass.
pub struct Grads {
    pub by_param: BTreeMap<String, Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn wrt(&self, name: &str) -> Option<&Tensor> {
        self.by_param.get(name)
    }

    /// Gradient of the root w.r.t. an arbitrary node (inputs included).
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    poison: Option<String>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, tag: &'static str) -> NodeId {
        if self.poison.is_none() && !value.all_finite() {
            self.poison = Some(tag.to_string());
        }
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, "input")
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.input(Tensor::scalar(v))
    }

    /// Loads a parameter by name; its gradient is routed back under
    /// that name by [`Graph::backward`].
    pub fn param(&mut self, params: &ParamSet, name: &str) -> NodeId {
        let t = params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).clone();
        self.push(Op::Param(name.to_string()), t, "param")
    }

    /// Loads a parameter as a constant: its value participates in the
    /// forward pass but receives no gradient (frozen network).
    pub fn frozen(&mut self, params: &ParamSet, name: &str) -> NodeId {
        let t = params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).clone();
        self.input(t)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = kernel::matmul(&self.nodes[a].value, &self.nodes[b].value);
        self.push(Op::Matmul(a, b), v, "matmul")
    }

    fn zip(&mut self, a: NodeId, b: NodeId, op: Op, f: fn(f64, f64) -> f64, tag: &'static str) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape(), tb.shape(), "{tag} shape");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let v = Tensor { rows: ta.rows, cols: ta.cols, data };
        self.push(op, v, tag)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, Op::Min(a, b), f64::min, "min")
    }

    /// `a + r` with `r` a `[1, c]` row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: NodeId, r: NodeId) -> NodeId {
        let v = kernel::add_row(&self.nodes[a].value, &self.nodes[r].value);
        self.push(Op::AddRow(a, r), v, "add_row")
    }

    /// `a * r` with `r` a `[1, c]` row broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: NodeId, r: NodeId) -> NodeId {
        let (ta, tr) = (&self.nodes[a].value, &self.nodes[r].value);
        assert_eq!(tr.rows, 1, "mul_row expects a row");
        assert_eq!(ta.cols, tr.cols, "mul_row width");
        let mut v = ta.clone();
        for i in 0..ta.rows {
            for c in 0..ta.cols {
                v.data[i * ta.cols + c] *= tr.data[c];
            }
        }
        self.push(Op::MulRow(a, r), v, "mul_row")
    }

    /// `a * c` with `c` a `[r, 1]` column broadcast over the columns of `a`.
    pub fn mul_col(&mut self, a: NodeId, c: NodeId) -> NodeId {
        let (ta, tc) = (&self.nodes[a].value, &self.nodes[c].value);
        assert_eq!(tc.cols, 1, "mul_col expects a column");
        assert_eq!(ta.rows, tc.rows, "mul_col rows");
        let mut v = ta.clone();
        for i in 0..ta.rows {
            let s = tc.data[i];
            for x in &mut v.data[i * ta.cols..(i + 1) * ta.cols] {
                *x *= s;
            }
        }
        self.push(Op::MulCol(a, c), v, "mul_col")
    }

    /// `a - c` with `c` a `[r, 1]` column broadcast over the columns of `a`.
    pub fn sub_col(&mut self, a: NodeId, c: NodeId) -> NodeId {
        let (ta, tc) = (&self.nodes[a].value, &self.nodes[c].value);
        assert_eq!(tc.cols, 1, "sub_col expects a column");
        assert_eq!(ta.rows, tc.rows, "sub_col rows");
        let mut v = ta.clone();
        for i in 0..ta.rows {
            let s = tc.data[i];
            for x in &mut v.data[i * ta.cols..(i + 1) * ta.cols] {
                *x -= s;
            }
        }
        self.push(Op::SubCol(a, c), v, "sub_col")
    }

    fn map(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64, tag: &'static str) -> NodeId {
        let ta = &self.nodes[a].value;
        let data = ta.data.iter().map(|&x| f(x)).collect();
        let v = Tensor { rows: ta.rows, cols: ta.cols, data };
        self.push(op, v, tag)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Neg(a), |x| -x, "neg")
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.map(a, Op::Scale(a, s), |x| x * s, "scale")
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        self.map(a, Op::AddScalar(a), |x| x + s, "add_scalar")
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.map(a, Op::LeakyRelu(a, slope), |x| if x < 0.0 { x * slope } else { x }, "leaky_relu")
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Tanh(a), f64::tanh, "tanh")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()), "sigmoid")
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Exp(a), f64::exp, "exp")
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Ln(a), f64::ln, "ln")
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Softplus(a), |x| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() }, "softplus")
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Square(a), |x| x * x, "square")
    }

    /// Hard clamp; gradient passes only strictly inside the interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi), "clamp")
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.data.iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let s: f64 = t.data.iter().sum();
        let n = t.numel() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s / n), "mean")
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let data = (0..t.rows).map(|r| t.row(r).iter().sum()).collect();
        self.push(Op::SumRows(a), Tensor { rows: t.rows, cols: 1, data }, "sum_rows")
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let c = t.cols as f64;
        let data = (0..t.rows).map(|r| t.row(r).iter().sum::<f64>() / c).collect();
        self.push(Op::MeanRows(a), Tensor { rows: t.rows, cols: 1, data }, "mean_rows")
    }

    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let data = (0..t.rows)
            .map(|r| {
                let row = t.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
            })
            .collect();
        self.push(Op::LogSumExpRows(a), Tensor { rows: t.rows, cols: 1, data }, "log_sum_exp_rows")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| &self.nodes[p].value).collect();
        let v = kernel::concat_cols(&tensors);
        self.push(Op::ConcatCols(parts.to_vec()), v, "concat_cols")
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let t = &self.nodes[a].value;
        assert!(lo < hi && hi <= t.cols, "slice_cols range");
        let mut v = Tensor::zeros(t.rows, hi - lo);
        for r in 0..t.rows {
            v.data[r * (hi - lo)..(r + 1) * (hi - lo)].copy_from_slice(&t.row(r)[lo..hi]);
        }
        self.push(Op::SliceCols(a, lo, hi), v, "slice_cols")
    }

    /// Picks one column per row: `out[r, 0] = a[r, idx[r]]`.
    pub fn take_per_row(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let t = &self.nodes[a].value;
        assert_eq!(idx.len(), t.rows, "take_per_row index length");
        let data = idx.iter().enumerate().map(|(r, &c)| t.at(r, c)).collect();
        self.push(Op::TakePerRow(a, idx.to_vec()), Tensor { rows: t.rows, cols: 1, data }, "take_per_row")
    }

    // Compositions used by every categorical head.

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let lse = self.log_sum_exp_rows(a);
        self.sub_col(a, lse)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let ls = self.log_softmax_rows(a);
        self.exp(ls)
    }

    /// Reverse pass from a scalar root. Returns per-parameter gradient
    /// sums plus per-node gradients for probing inputs.
    pub fn backward(&mut self, root: NodeId) -> Result<Grads, TensorError> {
        if let Some(tag) = &self.poison {
            return Err(TensorError::NonFinite(tag.clone()));
        }
        let rt = &self.nodes[root].value;
        if rt.numel() != 1 {
            return Err(TensorError::NonScalarRoot(rt.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(1.0));

        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !g.all_finite() {
                return Err(TensorError::NonFinite(format!("backward at node {id}")));
            }
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut by_param = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(g) = &grads[id] {
                    by_param
                        .entry(name.clone())
                        .and_modify(|acc: &mut Tensor| {
                            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                                *a += b;
                            }
                        })
                        .or_insert_with(|| g.clone());
                }
            }
        }
        Ok(Grads { by_param, nodes: grads })
    }

    fn accumulate(&self, id: NodeId, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let add_to = |grads: &mut Vec<Option<Tensor>>, target: NodeId, delta: Tensor| {
            match &mut grads[target] {
                Some(acc) => {
                    for (a, b) in acc.data.iter_mut().zip(&delta.data) {
                        *a += b;
                    }
                }
                None => grads[target] = Some(delta),
            }
        };
        let val = |n: NodeId| &self.nodes[n].value;
        let out = &self.nodes[id].value;

        match &self.nodes[id].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Matmul(a, b) => {
                let da = kernel::matmul(g, &val(*b).transpose());
                let db = kernel::matmul(&val(*a).transpose(), g);
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                let mut ng = g.clone();
                for v in &mut ng.data {
                    *v = -*v;
                }
                add_to(grads, *b, ng);
            }
            Op::Mul(a, b) => {
                let mut da = g.clone();
                for (v, w) in da.data.iter_mut().zip(&val(*b).data) {
                    *v *= w;
                }
                let mut db = g.clone();
                for (v, w) in db.data.iter_mut().zip(&val(*a).data) {
                    *v *= w;
                }
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::Min(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut da = g.clone();
                let mut db = g.clone();
                for i in 0..g.data.len() {
                    if va.data[i] <= vb.data[i] {
                        db.data[i] = 0.0;
                    } else {
                        da.data[i] = 0.0;
                    }
                }
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::AddRow(a, r) => {
                add_to(grads, *a, g.clone());
                let mut dr = Tensor::zeros(1, g.cols);
                for i in 0..g.rows {
                    for c in 0..g.cols {
                        dr.data[c] += g.at(i, c);
                    }
                }
                add_to(grads, *r, dr);
            }
            Op::MulRow(a, r) => {
                let tr = val(*r);
                let ta = val(*a);
                let mut da = g.clone();
                for i in 0..g.rows {
                    for c in 0..g.cols {
                        da.data[i * g.cols + c] *= tr.data[c];
                    }
                }
                let mut dr = Tensor::zeros(1, g.cols);
                for i in 0..g.rows {
                    for c in 0..g.cols {
                        dr.data[c] += g.at(i, c) * ta.at(i, c);
                    }
                }
                add_to(grads, *a, da);
                add_to(grads, *r, dr);
            }
            Op::MulCol(a, c) => {
                let tc = val(*c);
                let ta = val(*a);
                let mut da = g.clone();
                for i in 0..g.rows {
                    let s = tc.data[i];
                    for v in &mut da.data[i * g.cols..(i + 1) * g.cols] {
                        *v *= s;
                    }
                }
                let mut dc = Tensor::zeros(g.rows, 1);
                for i in 0..g.rows {
                    let mut s = 0.0;
                    for cix in 0..g.cols {
                        s += g.at(i, cix) * ta.at(i, cix);
                    }
                    dc.data[i] = s;
                }
                add_to(grads, *a, da);
                add_to(grads, *c, dc);
            }
            Op::SubCol(a, c) => {
                add_to(grads, *a, g.clone());
                let mut dc = Tensor::zeros(g.rows, 1);
                for i in 0..g.rows {
                    dc.data[i] = -g.row(i).iter().sum::<f64>();
                }
                add_to(grads, *c, dc);
            }
            Op::Neg(a) => {
                let mut da = g.clone();
                for v in &mut da.data {
                    *v = -*v;
                }
                add_to(grads, *a, da);
            }
            Op::Scale(a, s) => {
                let mut da = g.clone();
                for v in &mut da.data {
                    *v *= s;
                }
                add_to(grads, *a, da);
            }
            Op::AddScalar(a) => add_to(grads, *a, g.clone()),
            Op::LeakyRelu(a, slope) => {
                let mut da = g.clone();
                for (v, x) in da.data.iter_mut().zip(&val(*a).data) {
                    if *x < 0.0 {
                        *v *= slope;
                    }
                }
                add_to(grads, *a, da);
            }
            Op::Tanh(a) => {
                let mut da = g.clone();
                for (v, y) in da.data.iter_mut().zip(&out.data) {
                    *v *= 1.0 - y * y;
                }
                add_to(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let mut da = g.clone();
                for (v, y) in da.data.iter_mut().zip(&out.data) {
                    *v *= y * (1.0 - y);
                }
                add_to(grads, *a, da);
            }
            Op::Exp(a) => {
                let mut da = g.clone();
                for (v, y) in da.data.iter_mut().zip(&out.data) {
                    *v *= y;
                }
                add_to(grads, *a, da);
            }
            Op::Ln(a) => {
                let mut da = g.clone();
                for (v, x) in da.data.iter_mut().zip(&val(*a).data) {
                    *v /= x;
                }
                add_to(grads, *a, da);
            }
            Op::Softplus(a) => {
                let mut da = g.clone();
                for (v, x) in da.data.iter_mut().zip(&val(*a).data) {
                    *v *= 1.0 / (1.0 + (-x).exp());
                }
                add_to(grads, *a, da);
            }
            Op::Square(a) => {
                let mut da = g.clone();
                for (v, x) in da.data.iter_mut().zip(&val(*a).data) {
                    *v *= 2.0 * x;
                }
                add_to(grads, *a, da);
            }
            Op::Clamp(a, lo, hi) => {
                let mut da = g.clone();
                for (v, x) in da.data.iter_mut().zip(&val(*a).data) {
                    if *x <= *lo || *x >= *hi {
                        *v = 0.0;
                    }
                }
                add_to(grads, *a, da);
            }
            Op::Sum(a) => {
                let ta = val(*a);
                add_to(grads, *a, Tensor::full(ta.rows, ta.cols, g.item()));
            }
            Op::Mean(a) => {
                let ta = val(*a);
                let n = ta.numel() as f64;
                add_to(grads, *a, Tensor::full(ta.rows, ta.cols, g.item() / n));
            }
            Op::SumRows(a) => {
                let ta = val(*a);
                let mut da = Tensor::zeros(ta.rows, ta.cols);
                for r in 0..ta.rows {
                    let gv = g.data[r];
                    for v in &mut da.data[r * ta.cols..(r + 1) * ta.cols] {
                        *v = gv;
                    }
                }
                add_to(grads, *a, da);
            }
            Op::MeanRows(a) => {
                let ta = val(*a);
                let c = ta.cols as f64;
                let mut da = Tensor::zeros(ta.rows, ta.cols);
                for r in 0..ta.rows {
                    let gv = g.data[r] / c;
                    for v in &mut da.data[r * ta.cols..(r + 1) * ta.cols] {
                        *v = gv;
                    }
                }
                add_to(grads, *a, da);
            }
            Op::LogSumExpRows(a) => {
                // d lse / d x = softmax(x) per row.
                let ta = val(*a);
                let mut da = Tensor::zeros(ta.rows, ta.cols);
                for r in 0..ta.rows {
                    let lse = out.data[r];
                    let gv = g.data[r];
                    for c in 0..ta.cols {
                        da.data[r * ta.cols + c] = gv * (ta.at(r, c) - lse).exp();
                    }
                }
                add_to(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let tp = val(p);
                    let mut dp = Tensor::zeros(tp.rows, tp.cols);
                    for r in 0..tp.rows {
                        dp.data[r * tp.cols..(r + 1) * tp.cols]
                            .copy_from_slice(&g.row(r)[at..at + tp.cols]);
                    }
                    add_to(grads, p, dp);
                    at += tp.cols;
                }
            }
            Op::SliceCols(a, lo, _hi) => {
                let ta = val(*a);
                let mut da = Tensor::zeros(ta.rows, ta.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        da.data[r * ta.cols + lo + c] = g.at(r, c);
                    }
                }
                add_to(grads, *a, da);
            }
            Op::TakePerRow(a, idx) => {
                let ta = val(*a);
                let mut da = Tensor::zeros(ta.rows, ta.cols);
                for (r, &c) in idx.iter().enumerate() {
                    da.data[r * ta.cols + c] = g.data[r];
                }
                add_to(grads, *a, da);
            }
        }
    }
}

// ── Finite-difference checking ──────────────────────────────────────

/// Central-difference probe of `f` at `params[name][i]`.
pub fn central_diff(
    f: &mut dyn FnMut(&ParamSet) -> f64,
    params: &ParamSet,
    name: &str,
    i: usize,
    eps: f64,
) -> f64 {
    let mut p = params.clone();
    p.get_mut(name).unwrap().data[i] += eps;
    let hi = f(&p);
    p.get_mut(name).unwrap().data[i] -= 2.0 * eps;
    let lo = f(&p);
    (hi - lo) / (2.0 * eps)
}

/// Compares analytic gradients against central differences over every
/// entry of every parameter touched by `grads`. Returns the worst
/// relative error. An entry passes outright when both sides are below
/// `atol`; otherwise the error is `|a-b| / max(|a|, |b|)`.
pub fn max_rel_grad_err(
    f: &mut dyn FnMut(&ParamSet) -> f64,
    params: &ParamSet,
    grads: &Grads,
    eps: f64,
    atol: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, g) in &grads.by_param {
        for i in 0..g.data.len() {
            let fd = central_diff(f, params, name, i, eps);
            let ad = g.data[i];
            if ad.abs() < atol && fd.abs() < atol {
                continue;
            }
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randt(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    // === forward values ===

    #[test]
    fn matmul_hand_values() {
        // [1 2; 3 4] @ [5 6; 7 8] = [19 22; 43 50]
        let a = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        let c = kernel::matmul(&a, &b);
        assert_eq!(c.data, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn log_softmax_is_normalized() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let ls = g.log_softmax_rows(x);
        for r in 0..2 {
            let total: f64 = g.value(ls).row(r).iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn take_per_row_picks_columns() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(2, 3, vec![10.0, 11.0, 12.0, 20.0, 21.0, 22.0]));
        let t = g.take_per_row(x, &[2, 0]);
        assert_eq!(g.value(t).data, vec![12.0, 20.0]);
    }

    #[test]
    fn min_picks_smaller_side_and_routes_grads() {
        // min([1,5], [3,2]) = [1,2]; d/da = [1,0], d/db = [0,1].
        let mut g = Graph::new();
        let a = g.input(Tensor::row_vec(vec![1.0, 5.0]));
        let b = g.input(Tensor::row_vec(vec![3.0, 2.0]));
        let m = g.min(a, b);
        assert_eq!(g.value(m).data, vec![1.0, 2.0]);
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.node(a).unwrap().data, vec![1.0, 0.0]);
        assert_eq!(grads.node(b).unwrap().data, vec![0.0, 1.0]);
    }

    #[test]
    fn min_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = ParamSet::new();
        params.insert("a", randt(&mut rng, 4, 3));
        params.insert("b", randt(&mut rng, 4, 3));

        let build = |p: &ParamSet, g: &mut Graph| -> NodeId {
            let a = g.param(p, "a");
            let b = g.param(p, "b");
            let m = g.min(a, b);
            let sq = g.square(m);
            g.mean(sq)
        };

        let mut g = Graph::new();
        let root = build(&params, &mut g);
        let grads = g.backward(root).unwrap();
        let mut f = |p: &ParamSet| {
            let mut g = Graph::new();
            let root = build(p, &mut g);
            g.value(root).item()
        };
        let worst = max_rel_grad_err(&mut f, &params, &grads, 1e-5, 1e-7);
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn mul_row_broadcasts_and_matches_finite_differences() {
        // [1 2; 3 4] * row [10, 100] = [10 200; 30 400].
        let mut g = Graph::new();
        let a = g.input(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let r = g.input(Tensor::row_vec(vec![10.0, 100.0]));
        let m = g.mul_row(a, r);
        assert_eq!(g.value(m).data, vec![10.0, 200.0, 30.0, 400.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut params = ParamSet::new();
        params.insert("a", randt(&mut rng, 4, 3));
        params.insert("r", randt(&mut rng, 1, 3));
        let build = |p: &ParamSet, g: &mut Graph| -> NodeId {
            let a = g.param(p, "a");
            let r = g.param(p, "r");
            let m = g.mul_row(a, r);
            let sq = g.square(m);
            g.mean(sq)
        };
        let mut g = Graph::new();
        let root = build(&params, &mut g);
        let grads = g.backward(root).unwrap();
        let mut f = |p: &ParamSet| {
            let mut g = Graph::new();
            let root = build(p, &mut g);
            g.value(root).item()
        };
        let worst = max_rel_grad_err(&mut f, &params, &grads, 1e-5, 1e-7);
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    // === backward vs hand derivation ===

    #[test]
    fn backward_quadratic() {
        // f(x) = sum((x*2)^2), df/dx = 8x. At x = [1, -3]: [8, -24].
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vec(vec![1.0, -3.0]));
        let y = g.scale(x, 2.0);
        let y2 = g.square(y);
        let s = g.sum(y2);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.node(x).unwrap().data, vec![8.0, -24.0]);
    }

    #[test]
    fn backward_reuses_param_accumulates() {
        // f = sum(w) + sum(w * w): df/dw = 1 + 2w. At w = [2]: 5.
        let mut params = ParamSet::new();
        params.insert("w", Tensor::row_vec(vec![2.0]));
        let mut g = Graph::new();
        let w = g.param(&params, "w");
        let s1 = g.sum(w);
        let w2 = g.mul(w, w);
        let s2 = g.sum(w2);
        let tot = g.add(s1, s2);
        let grads = g.backward(tot).unwrap();
        assert_eq!(grads.wrt("w").unwrap().data, vec![5.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn nan_poisons_graph() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vec(vec![-1.0]));
        let l = g.ln(x); // ln of a negative is NaN
        let s = g.sum(l);
        assert!(matches!(g.backward(s), Err(TensorError::NonFinite(_))));
    }

    // === finite differences over every op ===

    #[test]
    fn finite_difference_composite_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParamSet::new();
        params.insert("w", randt(&mut rng, 3, 4));
        params.insert("b", randt(&mut rng, 1, 4));
        params.insert("u", randt(&mut rng, 4, 2));
        let x = randt(&mut rng, 5, 3);

        let build = |p: &ParamSet, g: &mut Graph| -> NodeId {
            let xin = g.input(x.clone());
            let w = g.param(p, "w");
            let b = g.param(p, "b");
            let u = g.param(p, "u");
            let h0 = g.matmul(xin, w);
            let h1 = g.add_row(h0, b);
            let h2 = g.leaky_relu(h1, 0.01);
            let h3 = g.tanh(h2);
            let h4 = g.matmul(h3, u);
            let sp = g.softplus(h4);
            let sg = g.sigmoid(h4);
            let mixed = g.mul(sp, sg);
            let ls = g.log_softmax_rows(mixed);
            let e = g.exp(ls);
            let sq = g.square(e);
            let m = g.mean(sq);
            let lse = g.log_sum_exp_rows(h4);
            let ms = g.mean(lse);
            g.add(m, ms)
        };

        let mut g = Graph::new();
        let root = build(&params, &mut g);
        let grads = g.backward(root).unwrap();
        let mut f = |p: &ParamSet| {
            let mut g = Graph::new();
            let root = build(p, &mut g);
            g.value(root).item()
        };
        let worst = max_rel_grad_err(&mut f, &params, &grads, 1e-5, 1e-7);
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn finite_difference_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        params.insert("a", randt(&mut rng, 4, 3));
        params.insert("b", randt(&mut rng, 4, 2));

        let build = |p: &ParamSet, g: &mut Graph| -> NodeId {
            let a = g.param(p, "a");
            let b = g.param(p, "b");
            let cat = g.concat_cols(&[a, b]);
            let sl = g.slice_cols(cat, 1, 4);
            let picked = g.take_per_row(cat, &[0, 4, 2, 3]);
            let sr = g.sum_rows(sl);
            let mr = g.mean_rows(cat);
            let d = g.sub(sr, mr);
            let m1 = g.mul_col(sl, picked);
            let s1 = g.sum(m1);
            let sc = g.sub_col(sl, d);
            let s2 = g.mean(sc);
            let cl = g.clamp(sc, -0.8, 0.8);
            let s3 = g.sum(cl);
            let t1 = g.add(s1, s2);
            g.add(t1, s3)
        };

        let mut g = Graph::new();
        let root = build(&params, &mut g);
        let grads = g.backward(root).unwrap();
        let mut f = |p: &ParamSet| {
            let mut g = Graph::new();
            let root = build(p, &mut g);
            g.value(root).item()
        };
        let worst = max_rel_grad_err(&mut f, &params, &grads, 1e-5, 1e-7);
        assert!(worst < 1e-4, "worst rel err {worst}");
    }
}
