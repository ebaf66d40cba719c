//! Dynamic tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! the gradients of every leaf that requires one. Parameters are bound by
//! reference-counted handle, so binding does not copy weights.

use std::sync::Arc;

use super::Tensor;
use crate::error::{Result, SableError};
use crate::params::{ParamId, ParamStore};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Gelu(Var),
    Swish(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GroupNorm {
        x: Var,
        scale: Var,
        shift: Var,
        groups: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    RmsNorm {
        x: Var,
        scale: Var,
        inv_rms: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    GatherCols(Var, Vec<usize>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by leaf [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
}

fn shape2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ra, ca) = shape2(a);
    let (rb, cb) = shape2(b);
    let dim = |x: usize, y: usize| -> Option<usize> {
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
    match (dim(ra, rb), dim(ca, cb)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(SableError::dim(
            op,
            format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
        )),
    }
}

fn broadcast_apply(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let (r, c) = broadcast_shape(op, a, b)?;
    let (ra, ca) = shape2(a);
    let (rb, cb) = shape2(b);
    Ok(Tensor::from_fn(r, c, |i, j| {
        let x = a.data()[(if ra == 1 { 0 } else { i }) * ca + if ca == 1 { 0 } else { j }];
        let y = b.data()[(if rb == 1 { 0 } else { i }) * cb + if cb == 1 { 0 } else { j }];
        f(x, y)
    }))
}

/// Sums `g` over the axes along which a tensor of shape `target` was broadcast.
fn reduce_to(g: Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g;
    }
    let (r, c) = shape2(&g);
    let tr = target.first().copied().unwrap_or(1);
    let tc = if target.len() < 2 { 1 } else { target[1] };
    let mut out = Tensor::zeros(&[tr, tc]);
    for i in 0..r {
        for j in 0..c {
            let oi = if tr == 1 { 0 } else { i };
            let oj = if tc == 1 { 0 } else { j };
            out.data_mut()[oi * tc + oj] += g.data()[i * c + j];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a value that gradients are not propagated into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let idx = id.index();
        if self.bound.len() <= idx {
            self.bound.resize(idx + 1, None);
        }
        if let Some(v) = self.bound[idx] {
            return v;
        }
        self.nodes.push(Node {
            value: store.value_shared(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[idx] = Some(v);
        v
    }

    /// Parameters bound on this graph with their nodes.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId::from_index(i), v)))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNT(a, b), rg))
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_tn(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulTN(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    /// Elementwise sum; `b` may broadcast along rows, columns or both.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_apply("add", self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_apply("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Hadamard product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_apply("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Swish(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), f64::min)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Minimum(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Sums each row: `[m, n] -> [m, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::column((0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect());
        let rg = self.rg(a);
        self.push(out, Op::RowSum(a), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, len)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_rows(&vals)?;
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_cols(&vals)?;
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Normalizes each row's `groups` contiguous column groups to zero mean
    /// and unit variance, then applies per-column `scale` and `shift`
    /// (both `[1, cols]`).
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        scale: Var,
        shift: Var,
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = shape2(xv);
        if groups == 0 || cols % groups != 0 {
            return Err(SableError::dim(
                "group_norm",
                format!("{groups} groups do not divide {cols} channels"),
            ));
        }
        for p in [scale, shift] {
            if self.shape(p) != [1, cols] {
                return Err(SableError::dim(
                    "group_norm",
                    format!("affine shape {:?}, expected [1, {cols}]", self.shape(p)),
                ));
            }
        }
        let width = cols / groups;
        let mut xhat = Tensor::zeros(&[rows, cols]);
        let mut inv_std = Vec::with_capacity(rows * groups);
        for r in 0..rows {
            let row = xv.row_slice(r);
            for g in 0..groups {
                let seg = &row[g * width..(g + 1) * width];
                let mu = seg.iter().sum::<f64>() / width as f64;
                let var = seg.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / width as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std.push(inv);
                for (k, v) in seg.iter().enumerate() {
                    xhat.data_mut()[r * cols + g * width + k] = (v - mu) * inv;
                }
            }
        }
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let out = Tensor::from_fn(rows, cols, |r, c| xhat.get(r, c) * sc[c] + sh[c]);
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                scale,
                shift,
                groups,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Root-mean-square normalization of each row with a learnable `[1, cols]` scale.
    pub fn rms_norm(&mut self, x: Var, scale: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = shape2(xv);
        if self.shape(scale) != [1, cols] {
            return Err(SableError::dim(
                "rms_norm",
                format!("scale shape {:?}, expected [1, {cols}]", self.shape(scale)),
            ));
        }
        let inv_rms: Vec<f64> = (0..rows)
            .map(|r| {
                let ms = xv.row_slice(r).iter().map(|v| v * v).sum::<f64>() / cols as f64;
                1.0 / (ms + eps).sqrt()
            })
            .collect();
        let sc = self.value(scale).data();
        let out = Tensor::from_fn(rows, cols, |r, c| xv.get(r, c) * inv_rms[r] * sc[c]);
        let rg = self.rg(x) || self.rg(scale);
        Ok(self.push(out, Op::RmsNorm { x, scale, inv_rms }, rg))
    }

    /// Row-wise softmax. Entries equal to `-inf` receive zero weight.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = shape2(t);
        let mut out = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            let row = t.row_slice(r);
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            for c in 0..cols {
                out.data_mut()[r * cols + c] = (row[c] - m).exp() / z;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = shape2(t);
        let mut out = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            let row = t.row_slice(r);
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for c in 0..cols {
                out.data_mut()[r * cols + c] = row[c] - lse;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Picks `a[i, idx[i]]` for every row: `[m, n] -> [m, 1]`.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = shape2(t);
        if idx.len() != rows || idx.iter().any(|&i| i >= cols) {
            return Err(SableError::dim(
                "gather_cols",
                format!("{} indices for [{rows},{cols}]", idx.len()),
            ));
        }
        let out = Tensor::column(idx.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect());
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherCols(a, idx.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(SableError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g, &mut grads)?;
        }
        // only leaves keep their gradient
        for (i, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        let target = self.shape(v);
        let g = reduce_to(g, target);
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(&g)?)?;
                }
            }
            Op::MatMulNT(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(self.value(*a))?)?;
                }
            }
            Op::MatMulTN(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, self.value(*b).matmul_nt(&g)?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul(&g)?)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?)?,
            Op::Add(a, b) => {
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.clone())?;
                }
                self.accumulate(grads, *a, g)?;
            }
            Op::Sub(a, b) => {
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.scale(-1.0))?;
                }
                self.accumulate(grads, *a, g)?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga = broadcast_apply("mul", &g, self.value(*b), |x, y| x * y)?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.rg(*b) {
                    let gb = broadcast_apply("mul", &g, self.value(*a), |x, y| x * y)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c))?,
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |d, y| d * y)?)?,
            Op::Log(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |d, x| d / x)?)?
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(out, |d, s| d * s * (1.0 - s))?)?
            }
            Op::Gelu(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |d, x| d * gelu_grad(x))?)?
            }
            Op::Swish(a) => {
                let ga = g.zip_map(self.value(*a), |d, x| {
                    let s = sigmoid(x);
                    d * (s + x * s * (1.0 - s))
                })?;
                self.accumulate(grads, *a, ga)?
            }
            Op::Square(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |d, x| 2.0 * d * x)?)?
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let ga = g.zip_map(self.value(*a), |d, x| if x >= lo && x <= hi { d } else { 0.0 })?;
                self.accumulate(grads, *a, ga)?
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for ((d, x), y) in ga.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        if x > y {
                            *d = 0.0;
                        }
                    }
                    self.accumulate(grads, *a, ga)?;
                }
                if self.rg(*b) {
                    let mut gb = g;
                    for ((d, x), y) in gb.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        if x <= y {
                            *d = 0.0;
                        }
                    }
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Sum(a) => {
                let ga = Tensor::full(self.shape(*a), g.item());
                self.accumulate(grads, *a, ga)?
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let ga = Tensor::full(self.shape(*a), g.item() / n);
                self.accumulate(grads, *a, ga)?
            }
            Op::RowSum(a) => {
                let (r, c) = shape2(self.value(*a));
                let ga = Tensor::from_fn(r, c, |i, _| g.data()[i]);
                self.accumulate(grads, *a, ga)?
            }
            Op::SliceRows(a, start) => {
                let (r, c) = shape2(self.value(*a));
                let len = g.rows();
                let ga = Tensor::from_fn(r, c, |i, j| {
                    if i >= *start && i < start + len {
                        g.get(i - start, j)
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga)?
            }
            Op::SliceCols(a, start) => {
                let (r, c) = shape2(self.value(*a));
                let len = g.cols();
                let ga = Tensor::from_fn(r, c, |i, j| {
                    if j >= *start && j < start + len {
                        g.get(i, j - start)
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga)?
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).rows();
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice_rows(offset, len)?)?;
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).cols();
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice_cols(offset, len)?)?;
                    }
                    offset += len;
                }
            }
            Op::GroupNorm {
                x,
                scale,
                shift,
                groups,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = shape2(xhat);
                let width = cols / groups;
                if self.rg(*shift) {
                    let gs = Tensor::row((0..cols).map(|c| (0..rows).map(|r| g.get(r, c)).sum()).collect());
                    self.accumulate(grads, *shift, gs)?;
                }
                if self.rg(*scale) {
                    let gs = Tensor::row(
                        (0..cols)
                            .map(|c| (0..rows).map(|r| g.get(r, c) * xhat.get(r, c)).sum())
                            .collect(),
                    );
                    self.accumulate(grads, *scale, gs)?;
                }
                if self.rg(*x) {
                    let sc = self.value(*scale).data();
                    let mut gx = Tensor::zeros(&[rows, cols]);
                    for r in 0..rows {
                        for grp in 0..*groups {
                            let inv = inv_std[r * groups + grp];
                            let base = r * cols + grp * width;
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for k in 0..width {
                                let d = g.data()[base + k] * sc[grp * width + k];
                                sum_d += d;
                                sum_dx += d * xhat.data()[base + k];
                            }
                            let w = width as f64;
                            for k in 0..width {
                                let d = g.data()[base + k] * sc[grp * width + k];
                                gx.data_mut()[base + k] =
                                    inv / w * (w * d - sum_d - xhat.data()[base + k] * sum_dx);
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::RmsNorm { x, scale, inv_rms } => {
                let xv = self.value(*x);
                let (rows, cols) = shape2(xv);
                let sc = self.value(*scale).data();
                if self.rg(*scale) {
                    let gs = Tensor::row(
                        (0..cols)
                            .map(|c| (0..rows).map(|r| g.get(r, c) * xv.get(r, c) * inv_rms[r]).sum())
                            .collect(),
                    );
                    self.accumulate(grads, *scale, gs)?;
                }
                if self.rg(*x) {
                    let mut gx = Tensor::zeros(&[rows, cols]);
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        let dot: f64 = (0..cols)
                            .map(|c| g.get(r, c) * sc[c] * xv.get(r, c) * inv)
                            .sum::<f64>()
                            / cols as f64;
                        for c in 0..cols {
                            let xn = xv.get(r, c) * inv;
                            gx.data_mut()[r * cols + c] = inv * (g.get(r, c) * sc[c] - xn * dot);
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::Softmax(a) => {
                let (rows, cols) = shape2(out);
                let mut ga = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    let y = out.row_slice(r);
                    let d = g.row_slice(r);
                    let dot: f64 = y.iter().zip(d).map(|(y, d)| y * d).sum();
                    for c in 0..cols {
                        ga.data_mut()[r * cols + c] = y[c] * (d[c] - dot);
                    }
                }
                self.accumulate(grads, *a, ga)?
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = shape2(out);
                let mut ga = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    let y = out.row_slice(r);
                    let d = g.row_slice(r);
                    let total: f64 = d.iter().sum();
                    for c in 0..cols {
                        ga.data_mut()[r * cols + c] = d[c] - y[c].exp() * total;
                    }
                }
                self.accumulate(grads, *a, ga)?
            }
            Op::GatherCols(a, idx) => {
                let (rows, cols) = shape2(self.value(*a));
                let mut ga = Tensor::zeros(&[rows, cols]);
                for (r, &c) in idx.iter().enumerate() {
                    ga.data_mut()[r * cols + c] = g.data()[r];
                }
                self.accumulate(grads, *a, ga)?
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central differences of a scalar function of one input tensor.
    fn finite_diff(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den = a.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(b.data().iter().map(|x| x * x).sum::<f64>().sqrt()).max(1e-12);
        num / den
    }

    fn check_unary(build: impl Fn(&mut Graph, Var) -> Var, x: Tensor) -> f64 {
        let eval = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.leaf(t.clone());
            let y = build(&mut g, v);
            let w = g.constant(Tensor::from_fn(g.value(y).rows(), g.value(y).cols(), |r, c| 0.3 + 0.1 * (r as f64) - 0.2 * c as f64));
            let p = g.mul(y, w).unwrap();
            let s = g.sum(p);
            g.value(s).item()
        };
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let y = build(&mut g, v);
        let w = g.constant(Tensor::from_fn(g.value(y).rows(), g.value(y).cols(), |r, c| 0.3 + 0.1 * (r as f64) - 0.2 * c as f64));
        let p = g.mul(y, w).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        rel_err(grads.wrt(v).unwrap(), &finite_diff(&x, &eval))
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 7, 3);
        let bc = b.clone();
        assert!(check_unary(move |g, v| { let bb = g.constant(bc.clone()); g.matmul(v, bb).unwrap() }, a.clone()) < 1e-6);
        let ac = a.clone();
        assert!(check_unary(move |g, v| { let aa = g.constant(ac.clone()); g.matmul(aa, v).unwrap() }, b) < 1e-6);
    }

    #[test]
    fn transposed_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(&mut rng, 4, 3);
        let b = random(&mut rng, 5, 3);
        let bc = b.clone();
        assert!(check_unary(move |g, v| { let bb = g.constant(bc.clone()); g.matmul_nt(v, bb).unwrap() }, a.clone()) < 1e-6);
        let c = random(&mut rng, 4, 6);
        assert!(check_unary(move |g, v| { let cc = g.constant(c.clone()); g.matmul_tn(v, cc).unwrap() }, a) < 1e-6);
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, 3, 4);
        assert!(check_unary(|g, v| g.gelu(v), x.clone()) < 1e-5);
        assert!(check_unary(|g, v| g.swish(v), x.clone()) < 1e-6);
        assert!(check_unary(|g, v| g.sigmoid(v), x.clone()) < 1e-6);
        assert!(check_unary(|g, v| g.exp(v), x.clone()) < 1e-6);
        assert!(check_unary(|g, v| g.square(v), x.clone()) < 1e-6);
        assert!(check_unary(|g, v| g.log_softmax(v), x.clone()) < 1e-6);
        assert!(check_unary(|g, v| g.softmax(v), x.clone()) < 1e-6);
        assert!(check_unary(|g, v| g.row_sum(v), x.clone()) < 1e-6);
        assert!(check_unary(|g, v| g.transpose(v).unwrap(), x.clone()) < 1e-6);
        let pos = x.map(|v| v.abs() + 0.5);
        assert!(check_unary(|g, v| g.log(v), pos) < 1e-6);
    }

    #[test]
    fn broadcast_gradients_reduce_to_input_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&mut rng, 4, 3);
        let row = random(&mut rng, 1, 3);
        let col = random(&mut rng, 4, 1);
        let xc = x.clone();
        assert!(check_unary(move |g, v| { let xx = g.constant(xc.clone()); g.mul(xx, v).unwrap() }, row.clone()) < 1e-6);
        let xc = x.clone();
        assert!(check_unary(move |g, v| { let xx = g.constant(xc.clone()); g.add(xx, v).unwrap() }, col.clone()) < 1e-6);
        let xc = x.clone();
        assert!(check_unary(move |g, v| { let xx = g.constant(xc.clone()); g.sub(xx, v).unwrap() }, col) < 1e-6);
    }

    #[test]
    fn slicing_and_concatenation_route_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, 4, 6);
        assert!(check_unary(|g, v| {
            let a = g.slice_cols(v, 0, 2).unwrap();
            let b = g.slice_cols(v, 3, 3).unwrap();
            let s = g.square(b);
            g.concat_cols(&[s, a]).unwrap()
        }, x.clone()) < 1e-6);
        assert!(check_unary(|g, v| {
            let a = g.slice_rows(v, 1, 2).unwrap();
            let b = g.slice_rows(v, 0, 1).unwrap();
            let e = g.exp(b);
            g.concat_rows(&[a, e, a]).unwrap()
        }, x) < 1e-6);
    }

    #[test]
    fn group_norm_statistics_and_constant_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&mut rng, 5, 8);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let one = g.constant(Tensor::ones(&[1, 8]));
        let zero = g.constant(Tensor::zeros(&[1, 8]));
        let y = g.group_norm(xv, 2, one, zero, 1e-8).unwrap();
        let yv = g.value(y);
        for r in 0..5 {
            for grp in 0..2 {
                let seg = &yv.row_slice(r)[grp * 4..grp * 4 + 4];
                let mean = seg.iter().sum::<f64>() / 4.0;
                let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-6);
            }
        }
        let c = g.constant(Tensor::full(&[2, 8], 3.25));
        let yc = g.group_norm(c, 4, one, zero, 1e-8).unwrap();
        assert_eq!(g.value(yc).max_abs(), 0.0);
        assert!(matches!(g.group_norm(xv, 3, one, zero, 1e-8), Err(SableError::Dimension { .. })));
    }

    #[test]
    fn norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&mut rng, 3, 6);
        let scale = random(&mut rng, 1, 6);
        let shift = random(&mut rng, 1, 6);
        let (s1, b1) = (scale.clone(), shift.clone());
        assert!(check_unary(move |g, v| {
            let s = g.constant(s1.clone());
            let b = g.constant(b1.clone());
            g.group_norm(v, 3, s, b, 1e-8).unwrap()
        }, x.clone()) < 1e-4);
        let xc = x.clone();
        let b2 = shift.clone();
        assert!(check_unary(move |g, v| {
            let xx = g.constant(xc.clone());
            let b = g.constant(b2.clone());
            g.group_norm(xx, 3, v, b, 1e-8).unwrap()
        }, scale.clone()) < 1e-6);
        let s3 = scale.clone();
        assert!(check_unary(move |g, v| {
            let s = g.constant(s3.clone());
            g.rms_norm(v, s, 1e-6).unwrap()
        }, x.clone()) < 1e-5);
        assert!(check_unary(move |g, v| {
            let xx = g.constant(x.clone());
            g.rms_norm(xx, v, 1e-6).unwrap()
        }, scale) < 1e-6);
    }

    #[test]
    fn swish_at_zero_and_zero_add_identity() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 1]));
        let s = g.swish(z);
        assert_eq!(g.value(s).item(), 0.0);
        let x = g.constant(Tensor::from_rows(&[vec![1.5, -2.0]]).unwrap());
        let zz = g.constant(Tensor::zeros(&[1, 2]));
        let y = g.add(x, zz).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let bad = g.constant(Tensor::zeros(&[3, 3]));
        assert!(g.add(x, bad).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_and_zero_dependency_has_zero_grad() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::ones(&[2, 2]));
        let unused = g.leaf(Tensor::ones(&[2, 2]));
        assert!(matches!(g.backward(w), Err(SableError::Contract(_))));
        let x = g.constant(Tensor::column(vec![2.0, -1.0]));
        let y = g.matmul(w, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        // d sum(Wx)/dW_ij = x_j, replicated over rows
        assert_eq!(grads.wrt(w).unwrap().data(), &[2.0, -1.0, 2.0, -1.0]);
        assert!(grads.wrt(unused).is_none());
    }

    #[test]
    fn clamp_and_minimum_select_branches() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::row(vec![0.5, 2.0]));
        let b = g.leaf(Tensor::row(vec![1.0, 1.0]));
        let m = g.minimum(a, b).unwrap();
        let c = g.clamp(m, 0.0, 0.8);
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[0.0, 0.0]);
    }
}
