//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every op appends a node to a [`Tape`]; node indices are therefore a
//! topological order and [`Tape::backward`] walks them in reverse once.
//! Nodes that do not depend on a parameter are skipped during backward.

mod gradcheck;
mod tensor;

pub use gradcheck::{central_difference, grad_check, grad_check_entries, GradCheckReport};
pub use tensor::{dot, norm, Tensor};

use tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc};

use crate::error::{Error, Result};

/// Smallest row norm accepted by [`Tape::normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    MulScalar(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    ConcatRows(Vec<Var>),
    IndexRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    SoftmaxRows(Var),
    Log(Var),
    ClampLog(Var, f64),
    Sum(Var),
    NormalizeRows(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation. Confined to a single thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
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

    /// Trainable leaf; receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a parameter leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, x, y));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.rows(), x.cols(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Adds a `1 x c` row to every row of an `r x c` matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(m), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(shape_err("add_row", x, r));
        }
        let mut out = x.clone();
        let c = x.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += r.data()[i % c];
        }
        let rg = self.rg(&[m, row]);
        Ok(self.push(out, Op::AddRow(m, row), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Affine(x, scale), rg))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    /// Multiplies every entry of `m` by the `1 x 1` value `s`.
    pub fn mul_scalar(&mut self, m: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(shape_err("mul_scalar", self.value(m), sv));
        }
        let k = sv.data()[0];
        let out = self.value(m).map(|v| v * k);
        let rg = self.rg(&[m, s]);
        Ok(self.push(out, Op::MulScalar(m, s), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() {
            return Err(shape_err("matmul", x, y));
        }
        let mut out = Tensor::zeros(x.rows(), y.cols());
        gemm_acc(x, y, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.cols() {
            return Err(shape_err("matmul_nt", x, y));
        }
        let mut out = Tensor::zeros(x.rows(), y.rows());
        gemm_nt_acc(x, y, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNT(a, b), rg))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of no tensors"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Gathers rows by index; indices may repeat.
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= t.rows() {
                return Err(Error::invalid(format!(
                    "index_rows: row {i} out of range for {:?}",
                    t.shape()
                )));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(idx.len(), cols, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::IndexRows(x, idx.to_vec()), rg))
    }

    /// Picks entry `cols[r]` from each row `r`, giving a `rows x 1` column.
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if cols.len() != t.rows() {
            return Err(Error::Shape {
                op: "pick_cols",
                lhs: t.shape(),
                rhs: (cols.len(), 1),
            });
        }
        let mut data = Vec::with_capacity(cols.len());
        for (r, &c) in cols.iter().enumerate() {
            if c >= t.cols() {
                return Err(Error::invalid(format!(
                    "pick_cols: column {c} out of range for {:?}",
                    t.shape()
                )));
            }
            data.push(t.get(r, c));
        }
        let out = Tensor::new(cols.len(), 1, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::PickCols(x, cols.to_vec()), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Sigmoid(x), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Tanh(x), rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LeakyRelu(x, slope), rg))
    }

    /// Row-wise softmax with max subtraction. A vector is a single row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let mut out = t.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.data().iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::NonFinite("log of a non-positive value".into()));
        }
        let out = t.map(f64::ln);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Log(x), rg))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn clamp_log(&mut self, x: Var, floor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(floor).ln());
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ClampLog(x, floor), rg))
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Scales each row to unit L2 norm. Rows with norm at or below
    /// [`NORM_EPS`] are rejected.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let n = norm(t.row(r));
            if !(n > NORM_EPS) {
                return Err(Error::DegenerateVector(n));
            }
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::NormalizeRows(x, norms), rg))
    }

    /// Populates gradients of every parameter reachable from the scalar
    /// `loss`. Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                lhs: lv.shape(),
                rhs: (1, 1),
            });
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let nodes = &self.nodes;
            let needs = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::Add(a, b) => {
                    if needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                    if needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let d = hadamard(&g, val(*b));
                        accumulate(&mut grads, *a, d);
                    }
                    if needs(*b) {
                        let d = hadamard(&g, val(*a));
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::AddRow(m, row) => {
                    if needs(*row) {
                        let mut d = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, v) in d.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *row, d);
                    }
                    if needs(*m) {
                        accumulate(&mut grads, *m, g);
                    }
                }
                Op::Affine(x, scale) => {
                    let s = *scale;
                    accumulate(&mut grads, *x, g.map(|v| s * v));
                }
                Op::MulScalar(m, s) => {
                    if needs(*s) {
                        let d = tensor::dot(g.data(), val(*m).data());
                        accumulate(&mut grads, *s, Tensor::scalar(d));
                    }
                    if needs(*m) {
                        let k = val(*s).data()[0];
                        accumulate(&mut grads, *m, g.map(|v| v * k));
                    }
                }
                Op::MatMul(a, b) => {
                    // out = a·b ; da = g·bᵀ ; db = aᵀ·g
                    if needs(*a) {
                        let (av, bv) = (val(*a), val(*b));
                        let mut d = Tensor::zeros(av.rows(), av.cols());
                        gemm_nt_acc(&g, bv, &mut d);
                        accumulate(&mut grads, *a, d);
                    }
                    if needs(*b) {
                        let (av, bv) = (val(*a), val(*b));
                        let mut d = Tensor::zeros(bv.rows(), bv.cols());
                        gemm_tn_acc(av, &g, &mut d);
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::MatMulNT(a, b) => {
                    // out = a·bᵀ ; da = g·b ; db = gᵀ·a
                    if needs(*a) {
                        let (av, bv) = (val(*a), val(*b));
                        let mut d = Tensor::zeros(av.rows(), av.cols());
                        gemm_acc(&g, bv, &mut d);
                        accumulate(&mut grads, *a, d);
                    }
                    if needs(*b) {
                        let (av, bv) = (val(*a), val(*b));
                        let mut d = Tensor::zeros(bv.rows(), bv.cols());
                        gemm_tn_acc(&g, av, &mut d);
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let rows = val(p).rows();
                        if needs(p) {
                            let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                            accumulate(&mut grads, p, Tensor::new(rows, cols, slice)?);
                        }
                        offset += rows;
                    }
                }
                Op::IndexRows(x, idx) => {
                    // scatter straight into the parent's buffer; a gather of a
                    // few rows from a large table is common
                    let xv = val(*x);
                    let d = grads[x.0].get_or_insert_with(|| Tensor::zeros(xv.rows(), xv.cols()));
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::PickCols(x, cols) => {
                    let xv = val(*x);
                    let mut d = Tensor::zeros(xv.rows(), xv.cols());
                    for (r, &c) in cols.iter().enumerate() {
                        d.set(r, c, g.data()[r]);
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let d = zip_map(&g, &node.value, |gv, y| gv * y * (1.0 - y));
                    accumulate(&mut grads, *x, d);
                }
                Op::Tanh(x) => {
                    let d = zip_map(&g, &node.value, |gv, y| gv * (1.0 - y * y));
                    accumulate(&mut grads, *x, d);
                }
                Op::LeakyRelu(x, slope) => {
                    let s = *slope;
                    let d = zip_map(&g, val(*x), |gv, xv| if xv > 0.0 { gv } else { s * gv });
                    accumulate(&mut grads, *x, d);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut d = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner = tensor::dot(yr, gr);
                        for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - inner);
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Log(x) => {
                    let d = zip_map(&g, val(*x), |gv, xv| gv / xv);
                    accumulate(&mut grads, *x, d);
                }
                Op::ClampLog(x, floor) => {
                    let f = *floor;
                    let d = zip_map(&g, val(*x), |gv, xv| if xv > f { gv / xv } else { 0.0 });
                    accumulate(&mut grads, *x, d);
                }
                Op::Sum(x) => {
                    let xv = val(*x);
                    accumulate(&mut grads, *x, Tensor::filled(xv.rows(), xv.cols(), g.data()[0]));
                }
                Op::NormalizeRows(x, norms) => {
                    // y = x/n ; dx = (g - y (y·g)) / n
                    let y = &node.value;
                    let mut d = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner = tensor::dot(yr, gr);
                        let n = norms[r];
                        for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = (gv - yv * inner) / n;
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("shapes checked in forward")
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// In-place softmax with max subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
