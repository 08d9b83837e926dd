//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows a [`ParamSet`] for its lifetime; every node pushed onto
//! the tape only refers to earlier nodes, so walking the tape backwards is a
//! valid reverse topological order.

use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, log_softmax_rows_slice, softmax_rows_slice};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named leaf tensors that receive gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Deliberate defects used to prove that the gradient checks can fail.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    SoftmaxBackwardSign,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    BlockMatMul { a: Var, b: Var, groups: usize, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    StraightThrough(Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

fn mismatch(op: &'static str, left: &Tensor, right: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, left: left.shape(), right: right.shape() }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph { params, param_vars: vec![None; params.len()], nodes: Vec::with_capacity(128), fault: None }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Constant, value, "constant")
    }

    /// Input whose gradient is wanted, e.g. for checks against finite
    /// differences. Plain constants receive no gradient.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { value: Some(value), op: Op::Constant, needs_grad: true });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::BlockMatMul { a, b, .. }
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulCol(a, b)
            | Op::Minimum(a, b)
            | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Clamp(a, _, _)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Pick(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::StraightThrough(a) => vec![*a],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), out, "matmul")
    }

    /// Block-diagonal product: `a` and `b` are split into `groups` equal row
    /// blocks and block `g` of the output is `a_g · b_g` (or `a_g · b_gᵀ`).
    pub fn block_matmul(&mut self, a: Var, b: Var, groups: usize, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if groups == 0 || ta.rows() % groups != 0 || tb.rows() % groups != 0 {
            return Err(mismatch("block_matmul", ta, tb));
        }
        let p = ta.rows() / groups;
        let k = ta.cols();
        let out = if trans_b {
            let q = tb.rows() / groups;
            if tb.cols() != k {
                return Err(mismatch("block_matmul", ta, tb));
            }
            let mut out = Tensor::zeros(groups * p, q);
            for g in 0..groups {
                gemm_nt(
                    &ta.data()[g * p * k..(g + 1) * p * k],
                    &tb.data()[g * q * k..(g + 1) * q * k],
                    &mut out.data_mut()[g * p * q..(g + 1) * p * q],
                    p,
                    k,
                    q,
                );
            }
            out
        } else {
            if tb.rows() / groups != k {
                return Err(mismatch("block_matmul", ta, tb));
            }
            let n = tb.cols();
            let mut out = Tensor::zeros(groups * p, n);
            for g in 0..groups {
                gemm_nn(
                    &ta.data()[g * p * k..(g + 1) * p * k],
                    &tb.data()[g * k * n..(g + 1) * k * n],
                    &mut out.data_mut()[g * p * n..(g + 1) * p * n],
                    p,
                    k,
                    n,
                );
            }
            out
        };
        self.push(Op::BlockMatMul { a, b, groups, trans_b }, out, "block_matmul")
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), out, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), out, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), out, "mul")
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "minimum", f64::min)?;
        self.push(Op::Minimum(a, b), out, "minimum")
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(mismatch("add_row", ta, tr));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        self.push(Op::AddRow(a, row), out, "add_row")
    }

    /// Multiplies row `r` of `a` by `c[r, 0]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(c));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(mismatch("mul_col", ta, tc));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let s = tc.data()[r];
            out.row_mut(r).iter_mut().for_each(|o| *o *= s);
        }
        self.push(Op::MulCol(a, c), out, "mul_col")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), out, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        self.push(Op::AddScalar(a), out, "add_scalar")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out, "tanh")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(Op::Log(a), out, "log")
    }

    /// Elementwise clamp; the gradient is zero outside `(lo, hi)`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), out, "clamp")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out, "transpose")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.rows(), t.cols(), softmax_rows_slice(t.data(), t.cols()))?;
        self.push(Op::SoftmaxRows(a), out, "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.rows(), t.cols(), log_softmax_rows_slice(t.data(), t.cols()))?;
        self.push(Op::LogSoftmaxRows(a), out, "log_softmax_rows")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(mismatch("concat_cols", ta, tb));
        }
        let cols = ta.cols() + tb.cols();
        let mut data = Vec::with_capacity(ta.rows() * cols);
        for r in 0..ta.rows() {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let out = Tensor::new(ta.rows(), cols, data)?;
        self.push(Op::ConcatCols(a, b), out, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(mismatch("concat_rows", self.value(*first), t));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::new(rows, cols, data)?;
        self.push(Op::ConcatRows(parts.to_vec()), out, "concat_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.rows() {
            return Err(TensorError::Invalid(format!("slice_rows {start}+{len} of {} rows", t.rows())));
        }
        let out = Tensor::new(len, t.cols(), t.data()[start * t.cols()..(start + len) * t.cols()].to_vec())?;
        self.push(Op::SliceRows(a, start), out, "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols() {
            return Err(TensorError::Invalid(format!("slice_cols {start}+{len} of {} cols", t.cols())));
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::new(t.rows(), len, data)?;
        self.push(Op::SliceCols(a, start), out, "slice_cols")
    }

    /// Selects `a[r, index[r]]` for every row, giving an `R x 1` column.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if index.len() != t.rows() || index.iter().any(|&i| i >= t.cols()) {
            return Err(TensorError::Invalid("pick index out of range".into()));
        }
        let data = index.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect();
        let out = Tensor::new(t.rows(), 1, data)?;
        self.push(Op::Pick(a, index.to_vec()), out, "pick")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(a), out, "mean")
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let out = Tensor::new(t.rows(), 1, data)?;
        self.push(Op::RowSum(a), out, "row_sum")
    }

    /// Forward value is `hard`; the backward pass routes the incoming
    /// gradient to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.value(soft).shape() {
            return Err(mismatch("straight_through", self.value(soft), &hard));
        }
        self.push(Op::StraightThrough(soft), hard, "straight_through")
    }

    /// Reverse sweep from a `1 x 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.shape() != (1, 1) {
            return Err(TensorError::NonScalarLoss(lt.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, param_vars: self.param_vars.clone() })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.value(Var(idx));
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, t: Tensor| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &self.nodes[idx].op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if wants(a) {
                    let mut da = Tensor::zeros(m, k);
                    gemm_nn(g.data(), tb.transpose().data(), da.data_mut(), m, n, k);
                    acc(*a, da);
                }
                if wants(b) {
                    let mut db = Tensor::zeros(k, n);
                    gemm_tn(ta.data(), g.data(), db.data_mut(), m, k, n);
                    acc(*b, db);
                }
            }
            Op::BlockMatMul { a, b, groups, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let groups = *groups;
                let p = ta.rows() / groups;
                let k = ta.cols();
                let mut da = Tensor::zeros(ta.rows(), k);
                let mut db = Tensor::zeros(tb.rows(), tb.cols());
                if *trans_b {
                    let q = tb.rows() / groups;
                    for gi in 0..groups {
                        let gs = &g.data()[gi * p * q..(gi + 1) * p * q];
                        gemm_nn(
                            gs,
                            &tb.data()[gi * q * k..(gi + 1) * q * k],
                            &mut da.data_mut()[gi * p * k..(gi + 1) * p * k],
                            p,
                            q,
                            k,
                        );
                        gemm_tn(
                            gs,
                            &ta.data()[gi * p * k..(gi + 1) * p * k],
                            &mut db.data_mut()[gi * q * k..(gi + 1) * q * k],
                            p,
                            q,
                            k,
                        );
                    }
                } else {
                    let n = tb.cols();
                    for gi in 0..groups {
                        let gs = &g.data()[gi * p * n..(gi + 1) * p * n];
                        gemm_nt(
                            gs,
                            &tb.data()[gi * k * n..(gi + 1) * k * n],
                            &mut da.data_mut()[gi * p * k..(gi + 1) * p * k],
                            p,
                            n,
                            k,
                        );
                        gemm_tn(
                            &ta.data()[gi * p * k..(gi + 1) * p * k],
                            gs,
                            &mut db.data_mut()[gi * k * n..(gi + 1) * k * n],
                            p,
                            k,
                            n,
                        );
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = zip(g, tb, |x, y| x * y);
                let db = zip(g, ta, |x, y| x * y);
                acc(*a, da);
                acc(*b, db);
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut da = Tensor::zeros(g.rows(), g.cols());
                let mut db = Tensor::zeros(g.rows(), g.cols());
                for i in 0..g.len() {
                    if ta.data()[i] <= tb.data()[i] {
                        da.data_mut()[i] = g.data()[i];
                    } else {
                        db.data_mut()[i] = g.data()[i];
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::AddRow(a, row) => {
                let mut dr = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, x) in dr.data_mut().iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                acc(*a, g.clone());
                acc(*row, dr);
            }
            Op::MulCol(a, c) => {
                let (ta, tc) = (self.value(*a), self.value(*c));
                let mut da = g.clone();
                let mut dc = Tensor::zeros(tc.rows(), 1);
                for r in 0..g.rows() {
                    let s = tc.data()[r];
                    da.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    dc.data_mut()[r] = g.row(r).iter().zip(ta.row(r)).map(|(x, y)| x * y).sum();
                }
                acc(*a, da);
                acc(*c, dc);
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Tanh(a) => acc(*a, zip(g, out, |x, y| x * (1.0 - y * y))),
            Op::Exp(a) => acc(*a, zip(g, out, |x, y| x * y)),
            Op::Log(a) => acc(*a, zip(g, self.value(*a), |x, y| x / y)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(*a, zip(g, self.value(*a), |x, y| if y > lo && y < hi { x } else { 0.0 }))
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::SoftmaxRows(a) => {
                let cols = out.cols();
                let sign = if self.fault == Some(Fault::SoftmaxBackwardSign) { -1.0 } else { 1.0 };
                let mut da = Tensor::zeros(out.rows(), cols);
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (d, (yv, gv)) in da.row_mut(r).iter_mut().zip(y.iter().zip(gr)) {
                        *d = sign * yv * (gv - dot);
                    }
                }
                acc(*a, da);
            }
            Op::LogSoftmaxRows(a) => {
                let cols = out.cols();
                let mut da = Tensor::zeros(out.rows(), cols);
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for (d, (yv, gv)) in da.row_mut(r).iter_mut().zip(y.iter().zip(gr)) {
                        *d = gv - yv.exp() * total;
                    }
                }
                acc(*a, da);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let mut da = Vec::with_capacity(g.rows() * ca);
                let mut db = Vec::with_capacity(g.rows() * cb);
                for r in 0..g.rows() {
                    da.extend_from_slice(&g.row(r)[..ca]);
                    db.extend_from_slice(&g.row(r)[ca..]);
                }
                acc(*a, Tensor::new(g.rows(), ca, da).expect("shape"));
                acc(*b, Tensor::new(g.rows(), cb, db).expect("shape"));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let cols = g.cols();
                    let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    acc(p, Tensor::new(rows, cols, slice).expect("shape"));
                    offset += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let t = self.value(*a);
                let mut da = Tensor::zeros(t.rows(), t.cols());
                let c = t.cols();
                da.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*a, da);
            }
            Op::SliceCols(a, start) => {
                let t = self.value(*a);
                let mut da = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, da);
            }
            Op::Pick(a, index) => {
                let t = self.value(*a);
                let mut da = Tensor::zeros(t.rows(), t.cols());
                for (r, &c) in index.iter().enumerate() {
                    da.set(r, c, g.data()[r]);
                }
                acc(*a, da);
            }
            Op::Sum(a) => {
                let t = self.value(*a);
                acc(*a, Tensor::full(t.rows(), t.cols(), g.item()));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                acc(*a, Tensor::full(t.rows(), t.cols(), g.item() / t.len() as f64));
            }
            Op::RowSum(a) => {
                let t = self.value(*a);
                let mut da = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    let s = g.data()[r];
                    da.row_mut(r).iter_mut().for_each(|x| *x = s);
                }
                acc(*a, da);
            }
            Op::StraightThrough(soft) => acc(*soft, g.clone()),
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient with respect to an arbitrary node; `None` if unreachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients aligned with `params`, zero-filled for parameters the loss
    /// never touched.
    pub fn for_params(&self, params: &ParamSet) -> Vec<Tensor> {
        params
            .ids()
            .map(|id| {
                self.param_vars[id.0]
                    .and_then(|v| self.grads[v.0].clone())
                    .unwrap_or_else(|| {
                        let t = params.get(id);
                        Tensor::zeros(t.rows(), t.cols())
                    })
            })
            .collect()
    }
}
