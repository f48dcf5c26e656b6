//! A small reverse-mode automatic differentiation tape over [`Mat`].
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for back-propagation. Constants and
//! frozen parameters are leaves with `needs_grad == false`; gradients are
//! neither stored for them nor propagated through subgraphs that only depend
//! on them.

use std::rc::Rc;

use crate::tensor::{dot, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    MeanRows(Var),
    Sum(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    KlDiv {
        logits: Var,
        target: Mat,
        probs: Mat,
    },
    Mse {
        x: Var,
        target: Mat,
    },
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax; entries whose mask bit is false get exactly zero.
/// Rows with no permitted entry are all zero.
pub fn softmax_rows(x: &Mat, mask: Option<&[bool]>) -> Mat {
    let (rows, cols) = x.shape();
    let mut out = Mat::zeros(rows, cols);
    for i in 0..rows {
        let allowed = |j: usize| mask.is_none_or(|m| m[i * cols + j]);
        let row = x.row(i);
        let max = (0..cols)
            .filter(|&j| allowed(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let o = out.row_mut(i);
        let mut z = 0.0;
        for j in 0..cols {
            if allowed(j) {
                o[j] = (row[j] - max).exp();
                z += o[j];
            }
        }
        o.iter_mut().for_each(|v| *v /= z);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width");
        let mut value = self.value(a).clone();
        let cols = value.cols();
        for i in 0..value.rows() {
            for j in 0..cols {
                value[(i, j)] += r[(0, j)];
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.ng(&[a]);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(&[a]);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(r) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut value = xhat.clone();
        for i in 0..rows {
            for (j, o) in value.row_mut(i).iter_mut().enumerate() {
                *o = *o * g[(0, j)] + b[(0, j)];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Row-wise softmax. Masked-out entries (mask false) are exactly zero.
    /// Every row must have at least one permitted entry.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Rc<[bool]>>) -> Var {
        if let Some(m) = &mask {
            assert_eq!(m.len(), self.value(x).len(), "softmax mask size");
        }
        let value = softmax_rows(self.value(x), mask.as_deref());
        let ng = self.ng(&[x]);
        self.push(value, Op::Softmax(x), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Mat::vstack(&mats);
        let ng = self.ng(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice_rows(start, end);
        let ng = self.ng(&[x]);
        self.push(value, Op::SliceRows(x, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Mat::hstack(&mats);
        let ng = self.ng(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice_cols(start, end);
        let ng = self.ng(&[x]);
        self.push(value, Op::SliceCols(x, start), ng)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(x).clone().reshape(rows, cols);
        let ng = self.ng(&[x]);
        self.push(value, Op::Reshape(x), ng)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).mean_rows();
        let ng = self.ng(&[x]);
        self.push(value, Op::MeanRows(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Mat::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(value, Op::Sum(x), ng)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let n = (dot(xv.row(i), xv.row(i)) + NORM_EPS).sqrt();
            norms.push(n);
            value.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        let ng = self.ng(&[x]);
        self.push(value, Op::L2NormalizeRows { x, norms }, ng)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let probs = softmax_rows(self.value(logits), None);
        assert_eq!(targets.len(), probs.rows(), "one target per row");
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -probs[(i, t)].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / targets.len().max(1) as f64;
        let ng = self.ng(&[logits]);
        self.push(
            Mat::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Mean over rows of `KL(target ‖ softmax(logits))`; target rows are distributions.
    pub fn kl_div(&mut self, logits: Var, target: Mat) -> Var {
        let probs = softmax_rows(self.value(logits), None);
        assert_eq!(target.shape(), probs.shape(), "kl target shape");
        let mut loss = 0.0;
        for (t, p) in target.as_slice().iter().zip(probs.as_slice()) {
            if *t > 0.0 {
                loss += t * (t.ln() - p.max(f64::MIN_POSITIVE).ln());
            }
        }
        loss /= probs.rows().max(1) as f64;
        let ng = self.ng(&[logits]);
        self.push(
            Mat::scalar(loss),
            Op::KlDiv {
                logits,
                target,
                probs,
            },
            ng,
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: Mat) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "mse shape");
        let n = xv.len().max(1) as f64;
        let loss = xv
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let ng = self.ng(&[x]);
        self.push(Mat::scalar(loss), Op::Mse { x, target }, ng)
    }

    /// Max-pools consecutive blocks of `group` rows, column-wise.
    pub fn group_max(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert!(group > 0 && rows % group == 0, "group_max block size");
        let n = rows / group;
        let mut value = Mat::zeros(n, cols);
        let mut argmax = vec![0usize; n * cols];
        for g in 0..n {
            for j in 0..cols {
                let mut best = g * group;
                for r in g * group..(g + 1) * group {
                    if xv[(r, j)] > xv[(best, j)] {
                        best = r;
                    }
                }
                value[(g, j)] = xv[(best, j)];
                argmax[g * cols + j] = best;
            }
        }
        let ng = self.ng(&[x]);
        self.push(value, Op::GroupMax { x, argmax }, ng)
    }

    /// Back-propagates from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if want(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ ; da = g b ; db = gᵀ a
                if want(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if want(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if want(*row) {
                    self.accumulate(grads, *row, column_sums(g));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if want(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Gelu(a) => {
                let d = self.value(*a).map(gelu_grad);
                self.accumulate(grads, *a, g.zip_map(&d, |x, y| x * y));
            }
            Op::Tanh(a) => {
                let d = node.value.map(|t| 1.0 - t * t);
                self.accumulate(grads, *a, g.zip_map(&d, |x, y| x * y));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                if want(*gamma) {
                    self.accumulate(grads, *gamma, column_sums(&g.zip_map(xhat, |a, b| a * b)));
                }
                if want(*beta) {
                    self.accumulate(grads, *beta, column_sums(g));
                }
                if want(*x) {
                    let gam = self.value(*gamma);
                    let mut dx = Mat::zeros(rows, cols);
                    let n = cols as f64;
                    for i in 0..rows {
                        let dxhat: Vec<f64> =
                            (0..cols).map(|j| g[(i, j)] * gam[(0, j)]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xhat.row(i)).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dx[(i, j)] =
                                inv_std[i] / n * (n * dxhat[j] - s1 - xhat[(i, j)] * s2);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Softmax(x) => {
                let p = &node.value;
                let mut dx = Mat::zeros(p.rows(), p.cols());
                for i in 0..p.rows() {
                    let s = dot(g.row(i), p.row(i));
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = p[(i, j)] * (g[(i, j)] - s);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let r = self.value(*p).rows();
                    if want(*p) {
                        self.accumulate(grads, *p, g.slice_rows(start, start + r));
                    }
                    start += r;
                }
            }
            Op::SliceRows(x, start) => {
                if want(*x) {
                    let (rows, cols) = self.shape(*x);
                    let mut dx = Mat::zeros(rows, cols);
                    for i in 0..g.rows() {
                        dx.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if want(*p) {
                        self.accumulate(grads, *p, g.slice_cols(start, start + c));
                    }
                    start += c;
                }
            }
            Op::SliceCols(x, start) => {
                if want(*x) {
                    let (rows, cols) = self.shape(*x);
                    let mut dx = Mat::zeros(rows, cols);
                    for i in 0..rows {
                        dx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Reshape(x) => {
                let (rows, cols) = self.shape(*x);
                self.accumulate(grads, *x, g.clone().reshape(rows, cols));
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.shape(*x);
                let inv = 1.0 / rows as f64;
                let mut dx = Mat::zeros(rows, cols);
                for i in 0..rows {
                    for j in 0..cols {
                        dx[(i, j)] = g[(0, j)] * inv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let (rows, cols) = self.shape(*x);
                self.accumulate(grads, *x, Mat::filled(rows, cols, g.scalar_value()));
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut dx = Mat::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let s = dot(y.row(i), g.row(i));
                    for j in 0..y.cols() {
                        dx[(i, j)] = (g[(i, j)] - y[(i, j)] * s) / norms[i];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.scalar_value() / targets.len().max(1) as f64;
                let mut dx = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    dx[(i, t)] -= 1.0;
                }
                self.accumulate(grads, *logits, dx.scale(scale));
            }
            Op::KlDiv {
                logits,
                target,
                probs,
            } => {
                let scale = g.scalar_value() / probs.rows().max(1) as f64;
                let dx = probs.zip_map(target, |p, t| (p - t) * scale);
                self.accumulate(grads, *logits, dx);
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let scale = 2.0 * g.scalar_value() / xv.len().max(1) as f64;
                self.accumulate(grads, *x, xv.zip_map(target, |a, b| (a - b) * scale));
            }
            Op::GroupMax { x, argmax } => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Mat::zeros(rows, cols);
                for gi in 0..g.rows() {
                    for j in 0..cols {
                        dx[(argmax[gi * cols + j], j)] += g[(gi, j)];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

fn column_sums(m: &Mat) -> Mat {
    let mut out = Mat::zeros(1, m.cols());
    for i in 0..m.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}
