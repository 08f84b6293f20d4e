//! Define-by-run reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value on a [`Tape`] is a rank-2 array; scalars are `1×1` and vectors
//! are single rows. Binary arithmetic broadcasts along any axis of length one.
//! A tape is built fresh for every minibatch and discarded after
//! [`Tape::backward`] has been read out.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Elu(Var),
    EluPlusOne(Var),
    Sigmoid(Var),
    Tanh(Var),
    LogSigmoid(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    Sum(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Expm1Div(Var, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Creation-ordered list of nodes; parents always precede children.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Mat>>,
    params: BTreeMap<String, Var>,
    kink: bool,
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape { op, lhs: a, rhs: b }),
    }
}

/// Sum `grad` down to `shape` along broadcast axes.
fn unbroadcast(grad: &Mat, shape: (usize, usize)) -> Mat {
    let mut g = grad.clone();
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn shape_of(m: &Mat) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// `elu(x) + 1` without the cancellation that flushes `exp(x)` to zero for
/// very negative `x`.
pub fn elu_plus_one(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// `expm1(w·d) / w`, continuous through `w = 0` where it equals `d`.
pub fn expm1_div(w: f64, d: f64) -> f64 {
    let x = w * d;
    if x.abs() < 1e-5 {
        d * (1.0 + x / 2.0 + x * x / 6.0)
    } else {
        x.exp_m1() / w
    }
}

/// Derivative of [`expm1_div`] with respect to `w`.
pub fn expm1_div_dw(w: f64, d: f64) -> f64 {
    let x = w * d;
    if x.abs() < 1e-5 {
        d * d * (0.5 + x / 3.0 + x * x / 8.0)
    } else {
        (d * x.exp() * w - x.exp_m1()) / (w * w)
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

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Mat, op: Op, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape_of(&self.nodes[v.0].value)
    }

    /// True when any kinked primitive (relu, sqrt, clamp) saw an input exactly
    /// at its kink during the forward pass.
    pub fn hit_kink(&self) -> bool {
        self.kink
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Leaf bound to a named entry of `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let value = store.value(name)?.clone();
        let v = self.leaf(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let value = self.value(a).dot(self.value(b));
        Ok(self.derived(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        broadcast_shape("add", self.shape(a), self.shape(b))?;
        let value = self.value(a) + self.value(b);
        Ok(self.derived(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        broadcast_shape("sub", self.shape(a), self.shape(b))?;
        let value = self.value(a) - self.value(b);
        Ok(self.derived(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        broadcast_shape("mul", self.shape(a), self.shape(b))?;
        let value = self.value(a) * self.value(b);
        Ok(self.derived(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.derived(value, Op::Scale(a, k), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + k` elementwise.
    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        self.derived(value, Op::Shift(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.derived(value, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.derived(value, Op::Log(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        if self.value(a).iter().any(|&x| x == 0.0) {
            self.kink = true;
        }
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.derived(value, Op::Relu(a), &[a])
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(elu);
        self.derived(value, Op::Elu(a), &[a])
    }

    pub fn elu_plus_one(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(elu_plus_one);
        self.derived(value, Op::EluPlusOne(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.derived(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.derived(value, Op::Tanh(a), &[a])
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(log_sigmoid);
        self.derived(value, Op::LogSigmoid(a), &[a])
    }

    /// Square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        if self.value(a).iter().any(|&x| x == 0.0) {
            self.kink = true;
        }
        let value = self.value(a).mapv(f64::sqrt);
        self.derived(value, Op::Sqrt(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.derived(value, Op::Clamp(a, lo, hi), &[a])
    }

    /// Softmax applied independently to each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let total = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        self.derived(value, Op::SoftmaxRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.derived(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum, giving an `n×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.derived(value, Op::SumCols(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        for p in parts {
            if self.shape(*p).0 != rows {
                return Err(Error::Shape { op: "concat_cols", lhs: self.shape(parts[0]), rhs: self.shape(*p) });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        Ok(self.derived(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        for p in parts {
            if self.shape(*p).1 != cols {
                return Err(Error::Shape { op: "concat_rows", lhs: self.shape(parts[0]), rhs: self.shape(*p) });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts checked");
        Ok(self.derived(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a);
        if start > end || end > shape.1 {
            return Err(Error::Shape { op: "slice_cols", lhs: shape, rhs: (start, end) });
        }
        let value = self.value(a).slice(ndarray::s![.., start..end]).to_owned();
        Ok(self.derived(value, Op::SliceCols(a, start, end), &[a]))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape.0) {
            return Err(Error::Shape { op: "gather_rows", lhs: shape, rhs: (bad, 0) });
        }
        let value = self.value(a).select(Axis(0), rows);
        Ok(self.derived(value, Op::GatherRows(a, rows.to_vec()), &[a]))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.gather_rows(a, &[i])
    }

    /// Column of `expm1(w·d_i) / w` for a scalar node `w` and constants `d`.
    pub fn expm1_div(&mut self, w: Var, d: &[f64]) -> Result<Var> {
        if self.shape(w) != (1, 1) {
            return Err(Error::Shape { op: "expm1_div", lhs: self.shape(w), rhs: (1, 1) });
        }
        let wv = self.scalar(w);
        let value = Array2::from_shape_fn((d.len(), 1), |(i, _)| expm1_div(wv, d[i]));
        Ok(self.derived(value, Op::Expm1Div(w, d.to_vec()), &[w]))
    }

    fn accumulate(&mut self, v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    /// Reverse sweep from a finite scalar `loss`. Clears any previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::BadLoss(format!("shape {shape:?}")));
        }
        let lv = self.scalar(loss);
        if !lv.is_finite() {
            return Err(Error::BadLoss(lv.to_string()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, op: &Op, g: &Mat) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.value(*b).t());
                let gb = self.value(*a).t().dot(g);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Add(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                self.accumulate(*a, unbroadcast(g, sa));
                self.accumulate(*b, unbroadcast(g, sb));
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                self.accumulate(*a, unbroadcast(g, sa));
                self.accumulate(*b, -unbroadcast(g, sb));
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let ga = unbroadcast(&(g * self.value(*b)), sa);
                let gb = unbroadcast(&(g * self.value(*a)), sb);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Scale(a, k) => self.accumulate(*a, g * *k),
            Op::Shift(a) => self.accumulate(*a, g.clone()),
            Op::Exp(a) => {
                let ga = g * &self.nodes[i].value;
                self.accumulate(*a, ga);
            }
            Op::Log(a) => {
                let ga = g / self.value(*a);
                self.accumulate(*a, ga);
            }
            Op::Relu(a) => {
                let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(*a, g * &mask);
            }
            Op::Elu(a) | Op::EluPlusOne(a) => {
                let d = self.value(*a).mapv(|x| if x >= 0.0 { 1.0 } else { x.exp() });
                self.accumulate(*a, g * &d);
            }
            Op::Sigmoid(a) => {
                let d = self.nodes[i].value.mapv(|s| s * (1.0 - s));
                self.accumulate(*a, g * &d);
            }
            Op::Tanh(a) => {
                let d = self.nodes[i].value.mapv(|t| 1.0 - t * t);
                self.accumulate(*a, g * &d);
            }
            Op::LogSigmoid(a) => {
                let d = self.value(*a).mapv(|x| sigmoid(-x));
                self.accumulate(*a, g * &d);
            }
            Op::Sqrt(a) => {
                let d = self.nodes[i].value.mapv(|s| if s > 0.0 { 0.5 / s } else { 0.0 });
                self.accumulate(*a, g * &d);
            }
            Op::Clamp(a, lo, hi) => {
                let d = self.value(*a).mapv(|x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 });
                self.accumulate(*a, g * &d);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ga = y * &(g - &dot);
                self.accumulate(*a, ga);
            }
            Op::Sum(a) => {
                let shape = self.shape(*a);
                self.accumulate(*a, Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::SumCols(a) => {
                let shape = self.shape(*a);
                let ga = g.broadcast(shape).expect("column broadcast").to_owned();
                self.accumulate(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    let gp = g.slice(ndarray::s![.., start..start + w]).to_owned();
                    self.accumulate(*p, gp);
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    let gp = g.slice(ndarray::s![start..start + h, ..]).to_owned();
                    self.accumulate(*p, gp);
                    start += h;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut ga = Array2::zeros(self.shape(*a));
                ga.slice_mut(ndarray::s![.., *start..*end]).assign(g);
                self.accumulate(*a, ga);
            }
            Op::GatherRows(a, rows) => {
                let mut ga = Array2::zeros(self.shape(*a));
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = ga.row_mut(r);
                    dst += &g.row(k);
                }
                self.accumulate(*a, ga);
            }
            Op::Expm1Div(w, d) => {
                let wv = self.scalar(*w);
                let total: f64 = d.iter().enumerate().map(|(k, &dk)| g[[k, 0]] * expm1_div_dw(wv, dk)).sum();
                self.accumulate(*w, Array2::from_elem((1, 1), total));
            }
        }
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every parameter bound through [`Tape::param`]. Parameters
    /// the loss does not depend on get zero arrays.
    pub fn param_grads(&self) -> BTreeMap<String, Mat> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = self.grad(*v).cloned().unwrap_or_else(|| Array2::zeros(self.shape(*v)));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Outcome of comparing analytic against central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error per parameter name.
    pub max_rel_err: BTreeMap<String, f64>,
    /// Parameters whose evaluation touched a kink; excluded from `passed`.
    pub non_differentiable: Vec<String>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err
            .iter()
            .filter(|(k, _)| !self.non_differentiable.contains(k))
            .all(|(_, &e)| e <= self.tol)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_err.values().cloned().fold(0.0, f64::max)
    }
}

/// Checks every bound parameter of the scalar function built by `f`.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-6)`: entries whose gradient is
/// tiny are compared absolutely, which avoids spurious failures from rounding
/// noise in the central difference.
pub fn grad_check<F>(store: &ParamStore, step: f64, tol: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let base_kink = tape.hit_kink();
    tape.backward(loss)?;
    let analytic = tape.param_grads();

    let mut report = GradCheckReport { max_rel_err: BTreeMap::new(), non_differentiable: Vec::new(), tol };
    let eval = |s: &ParamStore| -> Result<(f64, bool)> {
        let mut t = Tape::new();
        let l = f(&mut t, s)?;
        Ok((t.scalar(l), t.hit_kink()))
    };
    let mut probe = store.clone();
    for (name, grad) in &analytic {
        let mut worst = 0.0f64;
        let mut kinked = base_kink;
        for idx in 0..grad.len() {
            let original = probe.value(name)?.as_slice().expect("standard layout")[idx];
            probe.value_mut(name)?.as_slice_mut().expect("standard layout")[idx] = original + step;
            let (up, k1) = eval(&probe)?;
            probe.value_mut(name)?.as_slice_mut().expect("standard layout")[idx] = original - step;
            let (down, k2) = eval(&probe)?;
            probe.value_mut(name)?.as_slice_mut().expect("standard layout")[idx] = original;
            kinked |= k1 || k2;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.as_slice().expect("standard layout")[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
        if kinked {
            report.non_differentiable.push(name.clone());
        }
        report.max_rel_err.insert(name.clone(), worst);
    }
    Ok(report)
}
