//! Tape-based reverse-mode differentiation over dense row-major `f64` matrices.
//!
//! A [`Graph`] records every operation as a node. Values are computed eagerly;
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients only
//! into nodes that (transitively) depend on a leaf created with gradient
//! tracking. Frozen parameters enter the graph as untracked leaves, so no
//! weight gradients are ever materialized for them.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::ParamStore;

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    DivBy(Var, Var),
    Gelu(Var),
    /// Row standardization; aux holds the per-row reciprocal std.
    Standardize(Var),
    Softmax(Var),
    LogSoftmax(Var),
    /// Row l2 normalization; aux holds the per-row norms.
    L2Normalize(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SumRows(Var),
    SumAll(Var),
    Diag(Var),
    Reshape(Var),
    Square(Var),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
    aux: Option<Mat>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
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

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool, aux: Option<Mat>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false, None)
    }

    /// Tracked leaf: gradients are accumulated for it.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true, None)
    }

    /// Leaf bound to a named parameter. Trainable parameters are tracked; the
    /// same name always resolves to the same node within one graph.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let p = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not registered"));
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable, None);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Parameters bound on this graph, sorted by name.
    pub fn bound_params(&self) -> Vec<(&str, Var)> {
        let mut out: Vec<_> = self.params.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg, None)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg, None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg, None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg, None)
    }

    /// `x + row` with `row` (1×c) broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(x).1, self.shape(row).1, "add_row width mismatch");
        let value = self.value(x) + self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::AddRow(x, row), rg, None)
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(x).1, self.shape(row).1, "mul_row width mismatch");
        let value = self.value(x) * self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::MulRow(x, row), rg, None)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg, None)
    }

    /// `x · s` for a 1×1 node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1));
        let value = self.value(x) * self.scalar(s);
        let rg = self.rg(x) || self.rg(s);
        self.push(value, Op::ScaleBy(x, s), rg, None)
    }

    /// `x / s` for a 1×1 node `s`.
    pub fn div_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1));
        let value = self.value(x) / self.scalar(s);
        let rg = self.rg(x) || self.rg(s);
        self.push(value, Op::DivBy(x, s), rg, None)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu_scalar);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg, None)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * v);
        let rg = self.rg(x);
        self.push(value, Op::Square(x), rg, None)
    }

    /// Per-row `(x - mean) / sqrt(var + eps)`, the non-affine core of layer norm.
    pub fn standardize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.dim();
        let mut out = xv.clone();
        let mut rstd = Mat::zeros((r, 1));
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let mean = row.sum() / c as f64;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| v * rs);
            rstd[[i, 0]] = rs;
        }
        let rg = self.rg(x);
        self.push(out, Op::Standardize(x), rg, Some(rstd))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg, None)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax(x), rg, None)
    }

    /// Row-wise l2 normalization. Callers must reject zero rows beforehand.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Mat::zeros((out.nrows(), 1));
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / n);
            norms[[i, 0]] = n;
        }
        let rg = self.rg(x);
        self.push(out, Op::L2Normalize(x), rg, Some(norms))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).t().to_owned();
        let rg = self.rg(x);
        self.push(value, Op::Transpose(x), rg, None)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Mat::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.ncols(), cols, "concat_rows width mismatch");
            out.slice_mut(s![at..at + v.nrows(), ..]).assign(v);
            at += v.nrows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg, None)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Mat::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.nrows(), rows, "concat_cols height mismatch");
            out.slice_mut(s![.., at..at + v.ncols()]).assign(v);
            at += v.ncols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg, None)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(x);
        self.push(value, Op::SliceRows(x, start), rg, None)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(x);
        self.push(value, Op::SliceCols(x, start), rg, None)
    }

    /// r×c → r×1
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(x);
        self.push(value, Op::SumRows(x), rg, None)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll(x), rg, None)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// n×n → 1×n
    pub fn diag(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert_eq!(v.nrows(), v.ncols(), "diag of non-square matrix");
        let value = Mat::from_shape_fn((1, v.nrows()), |(_, j)| v[[j, j]]);
        let rg = self.rg(x);
        self.push(value, Op::Diag(x), rg, None)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(x);
        assert_eq!(v.len(), rows * cols, "reshape size mismatch");
        let flat: Vec<f64> = v.iter().cloned().collect();
        let value = Mat::from_shape_vec((rows, cols), flat).expect("shape checked");
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg, None)
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar");
        self.backward_seeded(&[(loss, Mat::from_elem((1, 1), 1.0))])
    }

    /// Reverse pass starting from arbitrary output cotangents.
    pub fn backward_seeded(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.dim(), "seed shape mismatch");
            if self.rg(*v) {
                accumulate(&mut grads, *v, g.clone());
                last = last.max(v.0 + 1);
            }
        }
        for i in (0..last).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, gy: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, gy.dot(&val(*b).t()));
                }
                if self.rg(*b) {
                    accumulate(grads, *b, val(*a).t().dot(gy));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, gy.dot(val(*b)));
                }
                if self.rg(*b) {
                    accumulate(grads, *b, gy.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, gy.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, gy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, gy.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, -gy);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, gy * val(*b));
                }
                if self.rg(*b) {
                    accumulate(grads, *b, gy * val(*a));
                }
            }
            Op::AddRow(x, row) => {
                if self.rg(*x) {
                    accumulate(grads, *x, gy.clone());
                }
                if self.rg(*row) {
                    accumulate(grads, *row, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(x, row) => {
                if self.rg(*x) {
                    accumulate(grads, *x, gy * val(*row));
                }
                if self.rg(*row) {
                    let g = (gy * val(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(grads, *row, g);
                }
            }
            Op::Scale(x, c) => {
                if self.rg(*x) {
                    accumulate(grads, *x, gy * *c);
                }
            }
            Op::ScaleBy(x, sv) => {
                let s = val(*sv)[[0, 0]];
                if self.rg(*x) {
                    accumulate(grads, *x, gy * s);
                }
                if self.rg(*sv) {
                    let d = Zip::from(gy).and(val(*x)).fold(0.0, |acc, g, x| acc + g * x);
                    accumulate(grads, *sv, Mat::from_elem((1, 1), d));
                }
            }
            Op::DivBy(x, sv) => {
                let s = val(*sv)[[0, 0]];
                if self.rg(*x) {
                    accumulate(grads, *x, gy / s);
                }
                if self.rg(*sv) {
                    let d = Zip::from(gy).and(val(*x)).fold(0.0, |acc, g, x| acc + g * x);
                    accumulate(grads, *sv, Mat::from_elem((1, 1), -d / (s * s)));
                }
            }
            Op::Gelu(x) => {
                if self.rg(*x) {
                    let mut g = val(*x).mapv(gelu_grad_scalar);
                    g *= gy;
                    accumulate(grads, *x, g);
                }
            }
            Op::Square(x) => {
                if self.rg(*x) {
                    accumulate(grads, *x, gy * val(*x) * 2.0);
                }
            }
            Op::Standardize(x) => {
                if self.rg(*x) {
                    let y = &node.value;
                    let rstd = node.aux.as_ref().expect("standardize aux");
                    let c = y.ncols() as f64;
                    let mut dx = gy.clone();
                    for (i, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
                        let yr = y.row(i);
                        let mean_g = row.sum() / c;
                        let mean_gy = row.iter().zip(yr.iter()).map(|(g, y)| g * y).sum::<f64>() / c;
                        let rs = rstd[[i, 0]];
                        Zip::from(&mut row)
                            .and(&yr)
                            .for_each(|g, &yv| *g = rs * (*g - mean_g - yv * mean_gy));
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Softmax(x) => {
                if self.rg(*x) {
                    let y = &node.value;
                    let mut dx = gy.clone();
                    for (i, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
                        let yr = y.row(i);
                        let dot = row.iter().zip(yr.iter()).map(|(g, y)| g * y).sum::<f64>();
                        Zip::from(&mut row).and(&yr).for_each(|g, &yv| *g = yv * (*g - dot));
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::LogSoftmax(x) => {
                if self.rg(*x) {
                    let y = &node.value;
                    let mut dx = gy.clone();
                    for (i, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
                        let yr = y.row(i);
                        let total = row.sum();
                        Zip::from(&mut row).and(&yr).for_each(|g, &yv| *g -= yv.exp() * total);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::L2Normalize(x) => {
                if self.rg(*x) {
                    let y = &node.value;
                    let norms = node.aux.as_ref().expect("l2 aux");
                    let mut dx = gy.clone();
                    for (i, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
                        let yr = y.row(i);
                        let dot = row.iter().zip(yr.iter()).map(|(g, y)| g * y).sum::<f64>();
                        let n = norms[[i, 0]];
                        Zip::from(&mut row).and(&yr).for_each(|g, &yv| *g = (*g - yv * dot) / n);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Transpose(x) => {
                if self.rg(*x) {
                    accumulate(grads, *x, gy.t().to_owned());
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let r = val(p).nrows();
                    if self.rg(p) {
                        accumulate(grads, p, gy.slice(s![at..at + r, ..]).to_owned());
                    }
                    at += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let c = val(p).ncols();
                    if self.rg(p) {
                        accumulate(grads, p, gy.slice(s![.., at..at + c]).to_owned());
                    }
                    at += c;
                }
            }
            Op::SliceRows(x, start) => {
                if self.rg(*x) {
                    let mut dx = Mat::zeros(val(*x).dim());
                    dx.slice_mut(s![*start..*start + gy.nrows(), ..]).assign(gy);
                    accumulate(grads, *x, dx);
                }
            }
            Op::SliceCols(x, start) => {
                if self.rg(*x) {
                    let mut dx = Mat::zeros(val(*x).dim());
                    dx.slice_mut(s![.., *start..*start + gy.ncols()]).assign(gy);
                    accumulate(grads, *x, dx);
                }
            }
            Op::SumRows(x) => {
                if self.rg(*x) {
                    let (r, c) = val(*x).dim();
                    let dx = Mat::from_shape_fn((r, c), |(i, _)| gy[[i, 0]]);
                    accumulate(grads, *x, dx);
                }
            }
            Op::SumAll(x) => {
                if self.rg(*x) {
                    accumulate(grads, *x, Mat::from_elem(val(*x).dim(), gy[[0, 0]]));
                }
            }
            Op::Diag(x) => {
                if self.rg(*x) {
                    let n = gy.ncols();
                    let mut dx = Mat::zeros((n, n));
                    for j in 0..n {
                        dx[[j, j]] = gy[[0, j]];
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    let flat: Vec<f64> = gy.iter().cloned().collect();
                    let dx = Mat::from_shape_vec(val(*x).dim(), flat).expect("reshape grad");
                    accumulate(grads, *x, dx);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }

    /// Gradients of every trainable parameter bound on `graph`, by name.
    pub fn param_grads(&self, graph: &Graph) -> Vec<(String, Mat)> {
        graph
            .bound_params()
            .into_iter()
            .filter(|(_, v)| graph.requires_grad(*v))
            .map(|(name, v)| (name.to_string(), self.get_or_zeros(v, graph.shape(v))))
            .collect()
    }
}
