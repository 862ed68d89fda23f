//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its value. [`Tape::backward`] walks the nodes in reverse creation order
//! and accumulates adjoints. Only nodes that depend on a parameter leaf
//! receive gradients; constants (raw features, frozen graphs) never do.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::sparse::SparseOperator;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Adjoint rule of a custom operation: maps the output gradient to one
/// gradient per input (same order as the inputs).
pub type CustomBackward = Box<dyn Fn(&Array2<f64>) -> Vec<Array2<f64>>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    ConstMatMulBt(Arc<Array2<f64>>, Var),
    Tanh(Var),
    SpMM(SparseOperator, Var),
    FrobScale(Var, f64),
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Column(Var, usize),
    MulCol(Var, Var),
    RowSoftmax(Var),
    Custom(Vec<Var>, CustomBackward),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).dim(), self.value(b).dim());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// `a + 1 * row`, broadcasting a `1 x d` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", va.dim(), vr.dim())));
        }
        let v = va + &vr.row(0);
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(v, Op::AddRow(a, row), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", va.dim(), vb.dim())));
        }
        let v = va.dot(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(Error::shape("matmul_bt", format!("{:?} x {:?}^T", va.dim(), vb.dim())));
        }
        let v = va.dot(&vb.t());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMulBt(a, b), rg))
    }

    /// `c * w^T` for a shared constant `c` that is never copied onto the tape.
    pub fn const_matmul_bt(&mut self, c: Arc<Array2<f64>>, w: Var) -> Result<Var> {
        let vw = self.value(w);
        if c.ncols() != vw.ncols() {
            return Err(Error::shape(
                "const_matmul_bt",
                format!("{:?} x {:?}^T", c.dim(), vw.dim()),
            ));
        }
        let v = c.dot(&vw.t());
        let rg = self.rg(w);
        Ok(self.push(v, Op::ConstMatMulBt(c, w), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    /// Frozen sparse operator times `a`.
    pub fn spmm(&mut self, op: &SparseOperator, a: Var) -> Result<Var> {
        let v = op.matrix().spmm(self.value(a).view())?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::SpMM(op.clone(), a), rg))
    }

    /// `a / sqrt(||a||_F)`. Fails when `a` is identically zero.
    pub fn frob_scale(&mut self, a: Var, what: &'static str) -> Result<Var> {
        let va = self.value(a);
        let norm = va.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNorm(what));
        }
        let v = va / norm.sqrt();
        let rg = self.rg(a);
        Ok(self.push(v, Op::FrobScale(a, norm), rg))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let v = ndarray::concatenate(Axis(0), &[va.view(), vb.view()])
            .map_err(|e| Error::shape("concat_rows", e.to_string()))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::ConcatRows(a, b), rg))
    }

    /// Rows `start..start+len` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.nrows() {
            return Err(Error::shape("slice_rows", format!("{start}+{len} > {}", va.nrows())));
        }
        let v = va.slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(a);
        Ok(self.push(v, Op::SliceRows(a, start), rg))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.nrows()) {
            return Err(Error::shape("gather", format!("row {bad} of {}", va.nrows())));
        }
        let v = va.select(Axis(0), idx);
        let rg = self.rg(a);
        Ok(self.push(v, Op::Gather(a, idx.to_vec()), rg))
    }

    /// Stacks `N x 1` columns side by side.
    pub fn concat_cols(&mut self, cols: &[Var]) -> Result<Var> {
        let views: Vec<_> = cols.iter().map(|&c| self.value(c).view()).collect();
        if views.iter().any(|v| v.ncols() != 1) {
            return Err(Error::shape("concat_cols", "inputs must be single columns"));
        }
        let v = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::shape("concat_cols", e.to_string()))?;
        let rg = cols.iter().any(|&c| self.rg(c));
        Ok(self.push(v, Op::ConcatCols(cols.to_vec()), rg))
    }

    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let va = self.value(a);
        if j >= va.ncols() {
            return Err(Error::shape("column", format!("column {j} of {}", va.ncols())));
        }
        let v = va.slice(s![.., j..j + 1]).to_owned();
        let rg = self.rg(a);
        Ok(self.push(v, Op::Column(a, j), rg))
    }

    /// Scales each row of `a` by the matching entry of the column `c`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (va, vc) = (self.value(a), self.value(c));
        if vc.ncols() != 1 || vc.nrows() != va.nrows() {
            return Err(Error::shape("mul_col", format!("{:?} by {:?}", va.dim(), vc.dim())));
        }
        let v = va * vc;
        let rg = self.rg(a) || self.rg(c);
        Ok(self.push(v, Op::MulCol(a, c), rg))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.axis_iter_mut(Axis(0)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        let rg = self.rg(a);
        self.push(v, Op::RowSoftmax(a), rg)
    }

    /// Records an operation whose value and adjoint are supplied by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Array2<f64>, backward: CustomBackward) -> Var {
        let rg = inputs.iter().any(|&i| self.rg(i));
        self.push(value, Op::Custom(inputs.to_vec(), backward), rg)
    }

    /// Back-propagates from a `1 x 1` node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).dim() != (1, 1) {
            return Err(Error::shape("backward", "root must be a 1x1 scalar"));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut acc = |v: Var, contribution: Array2<f64>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &contribution,
                    slot @ None => *slot = Some(contribution),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * self.value(*b));
                    acc(*b, &g * self.value(*a));
                }
                Op::Scale(a, c) => acc(*a, &g * *c),
                Op::AddRow(a, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g.clone());
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, g.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        acc(*b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulBt(a, b) => {
                    if self.rg(*a) {
                        acc(*a, g.dot(self.value(*b)));
                    }
                    if self.rg(*b) {
                        acc(*b, g.t().dot(self.value(*a)));
                    }
                }
                Op::ConstMatMulBt(c, w) => acc(*w, g.t().dot(c.as_ref())),
                Op::Tanh(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(*a, d);
                }
                Op::SpMM(op, a) => acc(*a, op.transpose().spmm(g.view())?),
                Op::FrobScale(a, norm) => {
                    let va = self.value(*a);
                    let inner: f64 = Zip::from(&g).and(va).fold(0.0, |s, &x, &y| s + x * y);
                    let mut d = &g / norm.sqrt();
                    d.scaled_add(-0.5 * inner * norm.powf(-2.5), va);
                    acc(*a, d);
                }
                Op::ConcatRows(a, b) => {
                    let na = self.value(*a).nrows();
                    acc(*a, g.slice(s![..na, ..]).to_owned());
                    acc(*b, g.slice(s![na.., ..]).to_owned());
                }
                Op::SliceRows(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(*a, d);
                }
                Op::Gather(a, idx) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    for (k, &r) in idx.iter().enumerate() {
                        let mut row = d.row_mut(r);
                        row += &g.row(k);
                    }
                    acc(*a, d);
                }
                Op::ConcatCols(cols) => {
                    for (j, &c) in cols.iter().enumerate() {
                        acc(c, g.slice(s![.., j..j + 1]).to_owned());
                    }
                }
                Op::Column(a, j) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *j..*j + 1]).assign(&g);
                    acc(*a, d);
                }
                Op::MulCol(a, c) => {
                    let (va, vc) = (self.value(*a), self.value(*c));
                    if self.rg(*c) {
                        let dc = (&g * va).sum_axis(Axis(1)).insert_axis(Axis(1));
                        acc(*c, dc);
                    }
                    acc(*a, &g * vc);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, y * &(&g - &dot));
                }
                Op::Custom(inputs, backward) => {
                    for (&input, d) in inputs.iter().zip(backward(&g)) {
                        acc(input, d);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}
