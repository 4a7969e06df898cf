//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value. [`Tape::backward`] walks the nodes in reverse, accumulating
//! adjoints, and writes parameter gradients into a [`ParameterStore`].
//! Vectors are represented as `1 × n` row matrices throughout.

use std::collections::HashMap;
use std::fmt;

use ndarray::{s, Array2, Axis, Zip};

use super::params::{ParamId, ParameterStore};
use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-defined op: `(input values, output value, output
/// adjoint) -> input adjoints`.
pub type CustomBackward = Box<dyn Fn(&[&Mat], &Mat, &Mat) -> Vec<Mat> + Send + Sync>;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Log(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NormRows(Var),
    SliceRows(Var, usize, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    Sum(Var),
    RowLinear(Var, Var),
    Custom(Vec<Var>, CustomBackward),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Adjoints of every node reached by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Mat> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    /// Parameters bound as constants while frozen, with their nodes.
    frozen: HashMap<ParamId, Option<Var>>,
    consumed: bool,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("consumed", &self.consumed)
            .finish()
    }
}

fn shape(m: &Mat) -> (usize, usize) {
    m.dim()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax with max shift.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise log-softmax with max shift.
pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.fold(0.0, |acc, &v| acc + (v - max).exp()).ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Variance floor of [`Tape::norm_rows`].
pub const NORM_EPS: f64 = 1e-5;

/// Row standardization and the per-row `sqrt(var + eps)` divisors.
pub fn norm_rows(x: &Mat) -> (Mat, Vec<f64>) {
    let mut out = x.clone();
    let mut scales = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
        let s = (var + NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) / s);
        scales.push(s);
    }
    (out, scales)
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

    /// Until [`Tape::thaw`], `ids` bind as constants: computation recorded
    /// meanwhile sends them no gradient. Earlier bindings are unaffected.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        for id in ids {
            self.frozen.entry(id).or_insert(None);
        }
    }

    pub fn thaw(&mut self) {
        self.frozen.clear();
    }

    /// Clears all nodes so the tape can record a new pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.frozen.clear();
        self.consumed = false;
    }

    pub fn value(&self, var: Var) -> &Mat {
        &self.nodes[var.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
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

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A non-parameter leaf whose adjoint is reported in [`Gradients`].
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies `var`'s current value into a constant, cutting the gradient path.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.nodes[var.0].value.clone();
        self.constant(value)
    }

    /// Binds a stored parameter; repeated calls return the same node so
    /// gradients from every use accumulate.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(slot) = self.frozen.get(&id) {
            if let Some(v) = *slot {
                return v;
            }
            let v = self.constant(store.value(id).clone());
            self.frozen.insert(id, Some(v));
            return v;
        }
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = store.is_trainable(id);
        let v = self.push(store.value(id).clone(), Op::Param(id), trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = shape(self.value(a));
        let (br, bc) = shape(self.value(b));
        if ac != br {
            return Err(Error::Shape(format!("matmul {ar}x{ac} by {br}x{bc}")));
        }
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let sa = shape(self.value(a));
        let sb = shape(self.value(b));
        if sa != sb {
            return Err(Error::Shape(format!("{what} {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `a (r×c) + bias (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, ac) = shape(self.value(a));
        let (br, bc) = shape(self.value(bias));
        if br != 1 || bc != ac {
            return Err(Error::Shape(format!("add_row bias {br}x{bc} for {ac} columns")));
        }
        let value = self.value(a) + self.value(bias);
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    /// Scales row `i` of `a (r×c)` by `m[i, 0]` for `m (r×1)`.
    pub fn mul_col(&mut self, a: Var, m: Var) -> Result<Var> {
        let (ar, _) = shape(self.value(a));
        let (mr, mc) = shape(self.value(m));
        if mr != ar || mc != 1 {
            return Err(Error::Shape(format!("mul_col {mr}x{mc} for {ar} rows")));
        }
        let value = self.value(a) * self.value(m);
        let rg = self.rg(a) || self.rg(m);
        Ok(self.push(value, Op::MulCol(a, m), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).mapv(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        if self.value(a).ncols() == 0 {
            return Err(Error::Shape("softmax over an empty row".into()));
        }
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        if self.value(a).ncols() == 0 {
            return Err(Error::Shape("log-softmax over an empty row".into()));
        }
        let value = log_softmax_rows(self.value(a));
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSoftmaxRows(a), rg))
    }

    /// Standardizes each row to zero mean and unit variance (no affine).
    pub fn norm_rows(&mut self, a: Var) -> Result<Var> {
        if self.value(a).ncols() == 0 {
            return Err(Error::Shape("normalizing an empty row".into()));
        }
        let value = norm_rows(self.value(a)).0;
        let rg = self.rg(a);
        Ok(self.push(value, Op::NormRows(a), rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let rows = self.value(a).nrows();
        if start >= end || end > rows {
            return Err(Error::Shape(format!("slice {start}..{end} of {rows} rows")));
        }
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceRows(a, start, end), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape("concat of zero parts".into()));
        };
        let cols = self.value(first).ncols();
        if parts.iter().any(|&p| self.value(p).ncols() != cols) {
            return Err(Error::Shape("concat_rows column mismatch".into()));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("checked shapes");
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).nrows() != self.value(b).nrows() {
            return Err(Error::Shape("concat_cols row mismatch".into()));
        }
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("checked shapes");
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row linear maps: row `p` of `x (P×a)` times block `p` of
    /// `w ((P·a)×b)`, giving `P×b`.
    pub fn row_linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (p, a) = shape(self.value(x));
        let (wr, b) = shape(self.value(w));
        if wr != p * a {
            return Err(Error::Shape(format!("row_linear {p}x{a} with {wr}x{b} weights")));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let mut value = Array2::zeros((p, b));
        for i in 0..p {
            let block = wv.slice(s![i * a..(i + 1) * a, ..]);
            value.row_mut(i).assign(&xv.row(i).dot(&block));
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::RowLinear(x, w), rg))
    }

    /// Records a user-defined op with an explicit backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Mat, backward: CustomBackward) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(value, Op::Custom(inputs.to_vec(), backward), rg)
    }

    /// Back-propagates from a scalar `loss`. Every trainable parameter in
    /// `store` has its gradient overwritten (zero if unreached).
    pub fn backward(&mut self, loss: Var, store: &mut ParameterStore) -> Result<Gradients> {
        let grads = self.backward_raw(loss)?;
        store.zero_grad();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = grads.get(Var(i)) {
                    if store.is_trainable(id) {
                        store.grad_mut(id).assign(g);
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Back-propagation without a parameter store (all leaves reported).
    pub fn backward_raw(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        if shape(self.value(loss)) != (1, 1) {
            return Err(Error::Shape("backward from a non-scalar node".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&val(*b).t()));
                acc(*b, val(*a).t().dot(g));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * val(*b));
                acc(*b, g * val(*a));
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulCol(a, m) => {
                acc(*a, g * val(*m));
                acc(*m, (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= 1.0 - y * y);
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= y * (1.0 - y));
                acc(*a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::Softplus(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| *d *= stable_sigmoid(x));
                acc(*a, d);
            }
            Op::Log(a) => acc(*a, g / val(*a)),
            Op::Abs(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    *d *= if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = y * g;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv -= yv * dot);
                }
                acc(*a, d);
            }
            Op::NormRows(a) => {
                let y = &node.value;
                let (_, scales) = norm_rows(&self.nodes[a.0].value);
                let mut d = g.clone();
                for ((mut drow, yrow), s) in d.rows_mut().into_iter().zip(y.rows()).zip(scales) {
                    let n = drow.len() as f64;
                    let gm = drow.sum() / n;
                    let gy = drow.dot(&yrow) / n;
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv = (*dv - gm - yv * gy) / s);
                }
                acc(*a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g.clone();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let gsum = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv -= yv.exp() * gsum);
                }
                acc(*a, d);
            }
            Op::SliceRows(a, start, end) => {
                let mut d = Array2::zeros(val(*a).dim());
                d.slice_mut(s![*start..*end, ..]).assign(g);
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = val(p).nrows();
                    acc(p, g.slice(s![offset..offset + rows, ..]).to_owned());
                    offset += rows;
                }
            }
            Op::ConcatCols(a, b) => {
                let ac = val(*a).ncols();
                acc(*a, g.slice(s![.., ..ac]).to_owned());
                acc(*b, g.slice(s![.., ac..]).to_owned());
            }
            Op::Sum(a) => acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::RowLinear(x, w) => {
                let xv = val(*x);
                let wv = val(*w);
                let (p, a) = xv.dim();
                let mut gx = Array2::zeros(xv.dim());
                let mut gw = Array2::zeros(wv.dim());
                for i in 0..p {
                    let block = wv.slice(s![i * a..(i + 1) * a, ..]);
                    gx.row_mut(i).assign(&block.dot(&g.row(i)));
                    let outer = xv
                        .row(i)
                        .insert_axis(Axis(1))
                        .dot(&g.row(i).insert_axis(Axis(0)));
                    gw.slice_mut(s![i * a..(i + 1) * a, ..]).assign(&outer);
                }
                acc(*x, gx);
                acc(*w, gw);
            }
            Op::Custom(inputs, backward) => {
                let values: Vec<&Mat> = inputs.iter().map(|&v| val(v)).collect();
                let ds = backward(&values, &node.value, g);
                for (&v, d) in inputs.iter().zip(ds) {
                    acc(v, d);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn linear_gradient() {
        let mut store = ParameterStore::new();
        let w = store.add("w", array![[0.5]]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(array![[2.0]]);
        let wv = tape.param(&store, w);
        let y = tape.matmul(x, wv).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w)[[0, 0]], 2.0);
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParameterStore::new();
        let w = store.add("w", array![[0.5]]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(array![[2.0]]);
        let live = tape.param(&store, w);
        tape.freeze([w]);
        let frozen = tape.param(&store, w);
        assert_ne!(live, frozen);
        assert_eq!(frozen, tape.param(&store, w));
        tape.thaw();
        assert_eq!(live, tape.param(&store, w));
        let y = tape.matmul(x, frozen).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w)[[0, 0]], 0.0);
    }

    #[test]
    fn norm_rows_standardizes() {
        let mut tape = Tape::new();
        let x = tape.input(array![[1.0, 2.0, 3.0, 6.0], [-4.0, 0.0, 0.5, 0.5]]);
        let y = tape.norm_rows(x).unwrap();
        for row in tape.value(y).rows() {
            assert!(row.mean().unwrap().abs() < 1e-12);
            let var = row.mapv(|v| v * v).mean().unwrap();
            assert!((var - 1.0).abs() < 1e-5);
        }
        // the output is shift invariant, so a constant upstream gradient vanishes
        let loss = tape.sum(y);
        let grads = tape.backward_raw(loss).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut tape = Tape::new();
        let z = tape.input(array![[0.3, -1.2, 2.5, 0.0]]);
        let sm = tape.softmax_rows(z).unwrap();
        let loss = tape.sum(sm);
        let grads = tape.backward_raw(loss).unwrap();
        for &g in grads.get(z).unwrap() {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let z = tape.input(array![[1.0]]);
        let loss = tape.sum(z);
        tape.backward_raw(loss).unwrap();
        assert!(matches!(tape.backward_raw(loss), Err(Error::BackwardTwice)));
        tape.reset();
        let z = tape.input(array![[1.0]]);
        let loss = tape.sum(z);
        assert!(tape.backward_raw(loss).is_ok());
    }

    #[test]
    fn unreached_parameters_get_zero_grad() {
        let mut store = ParameterStore::new();
        let a = store.add("a", array![[1.0]]).unwrap();
        let b = store.add("b", array![[1.0]]).unwrap();
        store.grad_mut(b).fill(9.0);
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let loss = tape.sum(av);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(a)[[0, 0]], 1.0);
        assert_eq!(store.grad(b)[[0, 0]], 0.0);
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParameterStore::new();
        let w = store.add("w", array![[3.0]]).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        assert_eq!(a, b);
        let sq = tape.mul(a, b).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w)[[0, 0]], 6.0);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let y = softmax_rows(&array![[1000.0, 0.0]]);
        assert!((y[[0, 0]] - 1.0).abs() < 1e-12);
        assert!(y[[0, 1]] >= 0.0 && y[[0, 1]] < 1e-12);
    }

    #[test]
    fn empty_softmax_is_rejected() {
        let mut tape = Tape::new();
        let z = tape.input(Array2::zeros((1, 0)));
        assert!(tape.softmax_rows(z).is_err());
    }
}
