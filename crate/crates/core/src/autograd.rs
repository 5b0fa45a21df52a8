//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] owns every value computed in a forward pass. Operations return
//! [`Var`] handles into the tape. [`Tape::backward`] consumes the tape and
//! walks it once in reverse, producing [`Gradients`] for every node that
//! depends on a `requires_grad` leaf.

use crate::attention::{self, Band};
use crate::error::{dim_err, EltError, Result};
use crate::tensor::{self, Axis, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Softmax(Var, Axis),
    Conv1d { x: Var, filters: Var, bias: Var },
    LpPool2 { x: Var, kernel: usize, stride: usize },
    LayerNorm { x: Var, gain: Var, shift: Var },
    Gelu(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    MirrorRows { half: Var, len: usize },
    Sum(Var),
    Mean(Var),
    Attention { q: Var, k: Var, v: Var, band: Band },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRowBias(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Softmax(a, _)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Conv1d { x, filters, bias } => vec![*x, *filters, *bias],
            Op::LpPool2 { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, shift } => vec![*x, *gain, *shift],
            Op::ConcatCols(parts) => parts.clone(),
            Op::MirrorRows { half, .. } => vec![*half],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Node indices of the non-leaf operations replayed, in replay order.
    pub fn visited_ops(&self) -> &[usize] {
        &self.visited
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records a leaf. Gradients are reported only for nodes that depend on
    /// at least one leaf created with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        self.push(out, Op::Transpose(a), "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return dim_err(format!("sub shape mismatch {:?} vs {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return dim_err(format!("mul shape mismatch {:?} vs {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = tensor::add_row_bias(self.value(a), self.value(bias))?;
        self.push(out, Op::AddRowBias(a, bias), "bias add")
    }

    /// `a·W + b` for a matrix `a`.
    pub fn affine(&mut self, a: Var, w: Var, b: Var) -> Result<Var> {
        let prod = self.matmul(a, w)?;
        self.add_row_bias(prod, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = tensor::map(self.value(a), |v| v * c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = tensor::map(self.value(a), |v| v + c);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return dim_err("tape softmax supports matrices only");
        }
        let out = tensor::softmax_axis(self.value(a), axis)?;
        self.push(out, Op::Softmax(a, axis), "softmax")
    }

    pub fn conv1d(&mut self, x: Var, filters: Var, bias: Var) -> Result<Var> {
        let out = tensor::conv1d(self.value(x), self.value(filters), self.value(bias))?;
        self.push(out, Op::Conv1d { x, filters, bias }, "conv1d")
    }

    pub fn lp_pool2(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let out = tensor::lp_pool2(self.value(x), kernel, stride)?;
        self.push(out, Op::LpPool2 { x, kernel, stride }, "lp_pool2")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let out = tensor::layer_norm(self.value(x), self.value(gain), self.value(shift))?;
        self.push(out, Op::LayerNorm { x, gain, shift }, "layer_norm")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = tensor::gelu(self.value(a));
        self.push(out, Op::Gelu(a), "gelu")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = tensor::relu(self.value(a));
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = tensor::concat_cols(&values)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat")
    }

    /// Expands `half` (`⌈len/2⌉ × d`) to a `len × d` matrix whose row `i` is
    /// `half[min(i, len-1-i)]`, i.e. symmetric about the midpoint.
    pub fn mirror_rows(&mut self, half: Var, len: usize) -> Result<Var> {
        let h = self.value(half);
        if h.rank() != 2 || h.rows() != len.div_ceil(2) {
            return dim_err(format!(
                "mirror_rows needs {} rows for length {len}, got {:?}",
                len.div_ceil(2),
                h.shape()
            ));
        }
        let d = h.cols();
        let mut out = Vec::with_capacity(len * d);
        for i in 0..len {
            out.extend_from_slice(h.row(mirror_index(i, len)));
        }
        let out = Tensor::matrix(len, d, out)?;
        self.push(out, Op::MirrorRows { half, len }, "mirror_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    /// Softmax attention with `1/sqrt(d_h)` scaling restricted to `band`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, band: Band) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let out = match band {
            Band::Full => attention::standard_attention(qt, kt, vt)?,
            Band::Local(l_win) => attention::local_attention(qt, kt, vt, l_win)?,
        };
        self.push(out, Op::Attention { q, k, v, band }, "attention")
    }

    /// Linear global attention `ρ_q(Q)·(ρ_k(K)ᵀ·V)` composed from recorded ops.
    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let rq = self.softmax(q, Axis::Row)?;
        let rk = self.softmax(k, Axis::Column)?;
        let rkt = self.transpose(rk)?;
        let ctx = self.matmul(rkt, v)?;
        self.matmul(rq, ctx)
    }

    /// Consumes the tape and returns `∂loss/∂node` for every node that
    /// requires a gradient.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_val = &self.nodes[loss.0].value;
        if loss_val.len() != 1 {
            return Err(EltError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_val.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut visited = Vec::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::new(loss_val.shape().to_vec(), vec![1.0])?);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited.push(idx);
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    tensor::matmul_nt_into(g.data(), bv.data(), &mut da, m, n, k);
                    accumulate(grads, *a, av.shape(), &da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    tensor::matmul_tn_into(av.data(), g.data(), &mut db, m, k, n);
                    accumulate(grads, *b, bv.shape(), &db);
                }
            }
            Op::Transpose(a) => {
                let gt = tensor::transpose(g)?;
                accumulate(grads, *a, val(*a).shape(), gt.data());
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        accumulate(grads, v, g.shape(), g.data());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.shape(), g.data());
                }
                if wants(*b) {
                    let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                    accumulate(grads, *b, g.shape(), &neg);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let d: Vec<f64> = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, av.shape(), &d);
                }
                if wants(*b) {
                    let d: Vec<f64> = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, bv.shape(), &d);
                }
            }
            Op::AddRowBias(a, bias) => {
                if wants(*a) {
                    accumulate(grads, *a, g.shape(), g.data());
                }
                if wants(*bias) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks_exact(n) {
                        tensor::axpy(1.0, row, &mut db);
                    }
                    accumulate(grads, *bias, val(*bias).shape(), &db);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = g.data().iter().map(|v| v * c).collect();
                accumulate(grads, *a, g.shape(), &d);
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.shape(), g.data()),
            Op::Softmax(a, axis) => {
                let d = softmax_backward(out, g, *axis);
                accumulate(grads, *a, out.shape(), &d);
            }
            Op::Conv1d { x, filters, bias } => {
                conv1d_backward(val(*x), val(*filters), g, grads, (*x, *filters, *bias), &wants)?;
            }
            Op::LpPool2 { x, kernel, stride } => {
                let xv = val(*x);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for t in 0..out.rows() {
                    let start = t * stride;
                    let end = (start + kernel).min(xv.rows());
                    for j in 0..d {
                        let norm = out.at(t, j);
                        if norm == 0.0 {
                            continue;
                        }
                        let coef = g.at(t, j) / norm;
                        for s in start..end {
                            dx[s * d + j] += coef * xv.at(s, j);
                        }
                    }
                }
                accumulate(grads, *x, xv.shape(), &dx);
            }
            Op::LayerNorm { x, gain, shift } => {
                layer_norm_backward(val(*x), val(*gain), g, grads, (*x, *gain, *shift), &wants);
            }
            Op::Gelu(a) => {
                let av = val(*a);
                let d: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| gy * (tensor::normal_cdf(x) + x * tensor::normal_pdf(x)))
                    .collect();
                accumulate(grads, *a, av.shape(), &d);
            }
            Op::Relu(a) => {
                let av = val(*a);
                let d: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| if x > 0.0 { gy } else { 0.0 })
                    .collect();
                accumulate(grads, *a, av.shape(), &d);
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = val(*p);
                    let w = pv.cols();
                    if wants(*p) {
                        let mut d = Vec::with_capacity(pv.len());
                        for row in g.data().chunks_exact(total) {
                            d.extend_from_slice(&row[offset..offset + w]);
                        }
                        accumulate(grads, *p, pv.shape(), &d);
                    }
                    offset += w;
                }
            }
            Op::MirrorRows { half, len } => {
                let hv = val(*half);
                let d = hv.cols();
                let mut dh = vec![0.0; hv.len()];
                for i in 0..*len {
                    let r = mirror_index(i, *len);
                    tensor::axpy(1.0, g.row(i), &mut dh[r * d..(r + 1) * d]);
                }
                accumulate(grads, *half, hv.shape(), &dh);
            }
            Op::Sum(a) => {
                let av = val(*a);
                let gy = g.data()[0];
                accumulate(grads, *a, av.shape(), &vec![gy; av.len()]);
            }
            Op::Mean(a) => {
                let av = val(*a);
                let gy = g.data()[0] / av.len() as f64;
                accumulate(grads, *a, av.shape(), &vec![gy; av.len()]);
            }
            Op::Attention { q, k, v, band } => {
                let (dq, dk, dv) = attention::attention_backward(val(*q), val(*k), val(*v), g, *band)?;
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if wants(var) {
                        accumulate(grads, var, d.shape(), d.data());
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn mirror_index(i: usize, len: usize) -> usize {
    i.min(len - 1 - i)
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, shape: &[usize], delta: &[f64]) {
    match &mut grads[var.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta.to_vec()).expect("gradient shape"));
        }
    }
}

fn softmax_backward(y: &Tensor, g: &Tensor, axis: Axis) -> Vec<f64> {
    let (m, n) = (y.rows(), y.cols());
    let mut d = vec![0.0; m * n];
    match axis {
        Axis::Row => {
            for i in 0..m {
                let (yr, gr) = (y.row(i), g.row(i));
                let s = tensor::dot(yr, gr);
                for j in 0..n {
                    d[i * n + j] = yr[j] * (gr[j] - s);
                }
            }
        }
        Axis::Column => {
            for j in 0..n {
                let s: f64 = (0..m).map(|i| y.at(i, j) * g.at(i, j)).sum();
                for i in 0..m {
                    d[i * n + j] = y.at(i, j) * (g.at(i, j) - s);
                }
            }
        }
    }
    d
}

fn conv1d_backward(
    x: &Tensor,
    filters: &Tensor,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
    vars: (Var, Var, Var),
    wants: &dyn Fn(Var) -> bool,
) -> Result<()> {
    let (xv, fv, bv) = vars;
    let l = x.rows();
    let c_in = x.len() / l;
    let [k, _, c_out] = filters.shape()[..] else {
        return dim_err("conv1d filters shape");
    };
    let half = (k / 2) as isize;
    let mut dx = vec![0.0; x.len()];
    let mut df = vec![0.0; filters.len()];
    let mut db = vec![0.0; c_out];
    for t in 0..l {
        let gr = &g.data()[t * c_out..(t + 1) * c_out];
        tensor::axpy(1.0, gr, &mut db);
        for tap in 0..k {
            let src = t as isize + tap as isize - half;
            if src < 0 || src >= l as isize {
                continue;
            }
            let src = src as usize;
            for ci in 0..c_in {
                let base = (tap * c_in + ci) * c_out;
                let w = &filters.data()[base..base + c_out];
                dx[src * c_in + ci] += tensor::dot(w, gr);
                tensor::axpy(x.data()[src * c_in + ci], gr, &mut df[base..base + c_out]);
            }
        }
    }
    if wants(xv) {
        accumulate(grads, xv, x.shape(), &dx);
    }
    if wants(fv) {
        accumulate(grads, fv, filters.shape(), &df);
    }
    if wants(bv) {
        accumulate(grads, bv, &[c_out], &db);
    }
    Ok(())
}

fn layer_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
    vars: (Var, Var, Var),
    wants: &dyn Fn(Var) -> bool,
) {
    let (xv, gv, sv) = vars;
    let d = x.cols();
    let df = d as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgain = vec![0.0; d];
    let mut dshift = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut gh = vec![0.0; d];
    for i in 0..x.rows() {
        let row = x.row(i);
        let gr = g.row(i);
        let (mean, inv_std) = tensor::row_moments(row);
        for j in 0..d {
            xhat[j] = (row[j] - mean) * inv_std;
            gh[j] = gr[j] * gain.data()[j];
            dgain[j] += gr[j] * xhat[j];
            dshift[j] += gr[j];
        }
        let sum_gh: f64 = gh.iter().sum();
        let sum_gh_xhat = tensor::dot(&gh, &xhat);
        for j in 0..d {
            dx[i * d + j] = inv_std / df * (df * gh[j] - sum_gh - xhat[j] * sum_gh_xhat);
        }
    }
    if wants(xv) {
        accumulate(grads, xv, x.shape(), &dx);
    }
    if wants(gv) {
        accumulate(grads, gv, gain.shape(), &dgain);
    }
    if wants(sv) {
        accumulate(grads, sv, &[d], &dshift);
    }
}
