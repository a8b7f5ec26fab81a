//! A small reverse-mode autodiff tape over [`Mat`].
//!
//! Every forward pass that needs gradients records onto a [`Graph`]. Frozen
//! parameters and constants enter as leaves that do not require gradients, so
//! their gradients are exactly zero and no backward work is spent on them.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::params::{ParamId, ParamSet};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Softmax(Var),
    Silu(Var),
    Tanh(Var),
    LayerNorm { x: Var, xhat: Mat, inv_std: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    RowSum(Var),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

static NO_PARAMS: ParamSet = ParamSet::new();

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, Var>>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::free()
    }
}

impl Graph<'static> {
    /// A graph with no parameter set attached.
    pub fn free() -> Self {
        Graph::new(&NO_PARAMS)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params, nodes: RefCell::new(Vec::new()), bound: RefCell::new(HashMap::new()) }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    fn push(&self, value: Mat, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that requires gradients (not backed by the parameter set).
    pub fn variable(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter; repeated calls return the same leaf. Frozen
    /// parameters become constant leaves.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let value = self.params.value(id).clone();
        let v = self.push(value, Op::Leaf, self.params.is_trainable(id));
        self.bound.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Mat {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.to_scalar()
    }

    fn unary(&self, a: Var, f: impl FnOnce(&Mat) -> Mat, op: Op) -> Var {
        let value = f(&self.nodes.borrow()[a.0].value);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    fn binary(&self, a: Var, b: Var, f: impl FnOnce(&Mat, &Mat) -> Mat, op: Op) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Mat::matmul, Op::MatMul(a, b))
    }

    /// `a · bᵀ`; with a weight `b` of shape `(d_out, d_in)` this is a
    /// projection of row tokens.
    pub fn matmul_t(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Mat::matmul_t, Op::MatMulT(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Mat::add, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Mat::sub, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Mat::hadamard, Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        self.binary(
            a,
            row,
            |x, r| {
                assert_eq!(r.shape(), (1, x.cols()), "add_row shape");
                let mut out = x.clone();
                for i in 0..out.rows() {
                    for (o, v) in out.row_mut(i).iter_mut().zip(r.as_slice()) {
                        *o += v;
                    }
                }
                out
            },
            Op::AddRow(a, row),
        )
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x.scale(k), Op::Scale(a, k))
    }

    /// Multiplies `a` by the `1 x 1` value `s`.
    pub fn scale_by(&self, a: Var, s: Var) -> Var {
        self.binary(
            a,
            s,
            |x, s| {
                assert_eq!(s.shape(), (1, 1), "scale_by expects a scalar");
                x.scale(s.to_scalar())
            },
            Op::ScaleBy(a, s),
        )
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        self.unary(a, softmax_rows, Op::Softmax(a))
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(|v| v * sigmoid(v)), Op::Silu(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(f64::tanh), Op::Tanh(a))
    }

    /// Per-row standardisation without affine parameters.
    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        let (value, xhat, inv_std) = {
            let x = &self.nodes.borrow()[a.0].value;
            let mut xhat = x.clone();
            let mut inv_std = Vec::with_capacity(x.rows());
            let n = x.cols() as f64;
            for r in 0..x.rows() {
                let row = xhat.row_mut(r);
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let is = 1.0 / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * is;
                }
                inv_std.push(is);
            }
            (xhat.clone(), xhat, inv_std)
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::LayerNorm { x: a, xhat, inv_std }, rg)
    }

    /// Scales each row to unit L2 norm. Rows must be non-zero.
    pub fn normalize_rows(&self, a: Var) -> Var {
        let (value, norms) = {
            let x = &self.nodes.borrow()[a.0].value;
            let mut out = x.clone();
            let mut norms = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                let row = out.row_mut(r);
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                for v in row.iter_mut() {
                    *v /= n;
                }
                norms.push(n);
            }
            (out, norms)
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::NormalizeRows { x: a, norms }, rg)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mats: Vec<&Mat> = parts.iter().map(|v| &nodes[v.0].value).collect();
            Mat::concat_rows(&mats).expect("concat_rows column mismatch")
        };
        let rg = self.rg(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        self.unary(a, |x| x.slice_rows(start, len), Op::SliceRows(a, start))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let cols: usize = parts.iter().map(|v| nodes[v.0].value.cols()).sum();
            let mut out = Mat::zeros(rows, cols);
            let mut off = 0;
            for p in parts {
                let m = &nodes[p.0].value;
                assert_eq!(m.rows(), rows, "concat_cols row mismatch");
                for r in 0..rows {
                    out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
                }
                off += m.cols();
            }
            out
        };
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        self.unary(a, |x| x.slice_cols(start, len), Op::SliceCols(a, start))
    }

    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        self.unary(
            a,
            |x| {
                let mut out = Mat::zeros(idx.len(), x.cols());
                for (i, &r) in idx.iter().enumerate() {
                    out.row_mut(i).copy_from_slice(x.row(r));
                }
                out
            },
            Op::GatherRows(a, idx.to_vec()),
        )
    }

    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, |x| Mat::scalar(x.sum()), Op::SumAll(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.nodes.borrow()[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums as an `n x 1` column.
    pub fn row_sum(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                let data = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
                Mat::from_vec(x.rows(), 1, data).expect("row_sum shape")
            },
            Op::RowSum(a),
        )
    }

    /// Mean of squared entries of `a - b`.
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Reverse pass from the `1 x 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.shape(), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, d: Mat| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul_t(val(*b)));
                    acc(*b, val(*a).t_matmul(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(*a, g.matmul(val(*b)));
                    acc(*b, g.t_matmul(val(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    acc(*a, g.hadamard(val(*b)));
                    acc(*b, g.hadamard(val(*a)));
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.mean_rows().scale(g.rows() as f64));
                    acc(*a, g);
                }
                Op::Scale(a, k) => acc(*a, g.scale(*k)),
                Op::ScaleBy(a, s) => {
                    let sv = val(*s).to_scalar();
                    acc(*s, Mat::scalar(g.hadamard(val(*a)).sum()));
                    acc(*a, g.scale(sv));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut dx = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, gy), yy) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yy * (gy - dot);
                        }
                    }
                    acc(*a, dx);
                }
                Op::Silu(a) => {
                    let d = val(*a).map(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    acc(*a, g.hadamard(&d));
                }
                Op::Tanh(a) => {
                    let d = node.value.map(|y| 1.0 - y * y);
                    acc(*a, g.hadamard(&d));
                }
                Op::LayerNorm { x, xhat, inv_std } => {
                    let n = xhat.cols() as f64;
                    let mut dx = Mat::zeros(xhat.rows(), xhat.cols());
                    for r in 0..xhat.rows() {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((o, gv), xv) in dx.row_mut(r).iter_mut().zip(gr).zip(xr) {
                            *o = inv_std[r] * (gv - mg - xv * mgx);
                        }
                    }
                    acc(*x, dx);
                }
                Op::NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut dx = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = (gv - yv * dot) / norms[r];
                        }
                    }
                    acc(*x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let rows = val(*p).rows();
                        acc(*p, g.slice_rows(off, rows));
                        off += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = val(*a);
                    let mut d = Mat::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        d.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let cols = val(*p).cols();
                        acc(*p, g.slice_cols(off, cols));
                        off += cols;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = val(*a);
                    let mut d = Mat::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(*a, d);
                }
                Op::GatherRows(a, idx) => {
                    let src = val(*a);
                    let mut d = Mat::zeros(src.rows(), src.cols());
                    for (i, &r) in idx.iter().enumerate() {
                        for (o, v) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(*a, d);
                }
                Op::SumAll(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Mat::filled(r, c, g.to_scalar()));
                }
                Op::RowSum(a) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Mat::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i).fill(g.get(i, 0));
                    }
                    acc(*a, d);
                }
            }
        }

        let bound = self.bound.borrow();
        let params = bound
            .iter()
            .map(|(id, v)| {
                let (r, c) = nodes[v.0].value.shape();
                (*id, grads[v.0].clone().unwrap_or_else(|| Mat::zeros(r, c)))
            })
            .collect();
        Gradients { leaves: grads, params }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    leaves: Vec<Option<Mat>>,
    params: HashMap<ParamId, Mat>,
}

impl Gradients {
    /// Gradient of a leaf. `None` if the leaf does not require gradients or
    /// the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a bound parameter; zeros for frozen parameters.
    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id)
    }

    pub fn into_params(self) -> HashMap<ParamId, Mat> {
        self.params
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}
