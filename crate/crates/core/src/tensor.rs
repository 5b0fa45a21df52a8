//! Dense row-major `f64` tensors and the forward kernels the model is built from.
//!
//! Every kernel here is a pure function. The autodiff tape in [`crate::autograd`]
//! calls these for its forward pass and records the matching adjoint.

use std::fmt;

use crate::error::{dim_err, EltError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return dim_err(format!("tensor rank must be 1..=3, got {}", shape.len()));
        }
        if shape.contains(&0) {
            return dim_err(format!("tensor extents must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {shape:?} holds {n} values but {} were supplied",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n]).expect("zeros: invalid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n]).expect("full: invalid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return dim_err("ragged rows");
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a matrix; rank-1 tensors are treated as a column.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return dim_err(format!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return dim_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(EltError::Numeric(format!("non-finite value produced by {what}")))
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn expect_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return dim_err(format!("{what} expects a matrix, got shape {:?}", self.shape));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `C = A·B` for `A: m×k`, `B: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_matrix("matmul lhs")?;
    let (k2, n) = b.expect_matrix("matmul rhs")?;
    if k != k2 {
        return dim_err(format!("matmul inner extents differ: {m}x{k} · {k2}x{n}"));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Accumulates `A·B` into `out` (row-major, i-k-j order).
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], out_row);
            }
        }
    }
}

/// Accumulates `Aᵀ·B` into `out` for `A: m×k`, `B: m×n`, `out: k×n`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, b_row, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}

/// Accumulates `A·Bᵀ` into `out` for `A: m×k`, `B: n×k`, `out: m×n`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.expect_matrix("transpose")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return dim_err(format!("add shape mismatch {:?} vs {:?}", a.shape, b.shape));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape.clone(), data)
}

/// Adds a length-`n` bias to every row of an `m×n` matrix.
pub fn add_row_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, n) = a.expect_matrix("add_row_bias")?;
    if bias.len() != n {
        return dim_err(format!("bias of length {} for {n} columns", bias.len()));
    }
    let mut out = a.data.clone();
    for row in out.chunks_exact_mut(n) {
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    Tensor::new(a.shape.clone(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Normalize each row across its columns.
    Row,
    /// Normalize each column across its rows.
    Column,
}

/// Numerically stable softmax along `axis` of a matrix, or of every matrix
/// in a rank-3 batch.
pub fn softmax_axis(x: &Tensor, axis: Axis) -> Result<Tensor> {
    let (batch, m, n) = match x.shape.as_slice() {
        [m, n] => (1, *m, *n),
        [b, m, n] => (*b, *m, *n),
        _ => return dim_err(format!("softmax_axis expects rank 2 or 3, got {:?}", x.shape)),
    };
    let mut out = x.data.clone();
    for mat in out.chunks_exact_mut(m * n).take(batch) {
        match axis {
            Axis::Row => {
                for row in mat.chunks_exact_mut(n) {
                    softmax_in_place(row);
                }
            }
            Axis::Column => {
                let mut col = vec![0.0; m];
                for j in 0..n {
                    for i in 0..m {
                        col[i] = mat[i * n + j];
                    }
                    softmax_in_place(&mut col);
                    for i in 0..m {
                        mat[i * n + j] = col[i];
                    }
                }
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// "Same"-padded 1-D cross-correlation.
///
/// `x: l×c_in`, `filters: k×c_in×c_out`, `bias: c_out`; output `l×c_out`.
pub fn conv1d(x: &Tensor, filters: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (l, c_in, k, c_out) = conv_dims(x, filters, bias)?;
    let half = (k / 2) as isize;
    let mut out = vec![0.0; l * c_out];
    for t in 0..l {
        let row = &mut out[t * c_out..(t + 1) * c_out];
        row.copy_from_slice(&bias.data);
        for tap in 0..k {
            let src = t as isize + tap as isize - half;
            if src < 0 || src >= l as isize {
                continue;
            }
            let src = src as usize;
            for ci in 0..c_in {
                let xv = x.data[src * c_in + ci];
                if xv != 0.0 {
                    let w = &filters.data[(tap * c_in + ci) * c_out..(tap * c_in + ci + 1) * c_out];
                    axpy(xv, w, row);
                }
            }
        }
    }
    Tensor::new(vec![l, c_out], out)
}

pub(crate) fn conv_dims(
    x: &Tensor,
    filters: &Tensor,
    bias: &Tensor,
) -> Result<(usize, usize, usize, usize)> {
    let (l, c_in) = match x.shape.as_slice() {
        [l] => (*l, 1),
        [l, c] => (*l, *c),
        _ => return dim_err(format!("conv1d input must be rank 1 or 2, got {:?}", x.shape)),
    };
    let [k, fc_in, c_out] = filters.shape[..] else {
        return dim_err(format!("conv1d filters must be k×c_in×c_out, got {:?}", filters.shape));
    };
    if k % 2 == 0 {
        return Err(EltError::Config(format!("conv1d kernel size must be odd, got {k}")));
    }
    if fc_in != c_in {
        return dim_err(format!("conv1d filters expect {fc_in} input channels, input has {c_in}"));
    }
    if bias.len() != c_out {
        return dim_err(format!("conv1d bias has {} entries for {c_out} channels", bias.len()));
    }
    Ok((l, c_in, k, c_out))
}

/// Output length of [`lp_pool2`] for an input of length `l`.
pub fn pooled_len(l: usize, stride: usize) -> usize {
    l.div_ceil(stride)
}

/// L2 pooling over the length axis. Window `t` covers rows
/// `[t·stride, t·stride + kernel)` clipped to the input.
pub fn lp_pool2(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let (l, d) = x.expect_matrix("lp_pool2")?;
    if kernel == 0 || stride == 0 {
        return Err(EltError::Config(format!(
            "pool kernel and stride must be >= 1, got {kernel}/{stride}"
        )));
    }
    let lp = pooled_len(l, stride);
    let mut out = vec![0.0; lp * d];
    for t in 0..lp {
        let start = t * stride;
        let end = (start + kernel).min(l);
        let row = &mut out[t * d..(t + 1) * d];
        for s in start..end {
            for (o, v) in row.iter_mut().zip(x.row(s)) {
                *o += v * v;
            }
        }
        for o in row.iter_mut() {
            *o = o.sqrt();
        }
    }
    Tensor::new(vec![lp, d], out)
}

/// Per-row layer normalization with affine `gain`/`shift`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (_, d) = x.expect_matrix("layer_norm")?;
    if d < 2 {
        return dim_err("layer_norm needs at least 2 features");
    }
    if gain.len() != d || shift.len() != d {
        return dim_err(format!("layer_norm affine parameters must have {d} entries"));
    }
    let mut out = x.data.clone();
    for row in out.chunks_exact_mut(d) {
        let (mean, inv_std) = row_moments(row);
        for ((v, g), s) in row.iter_mut().zip(&gain.data).zip(&shift.data) {
            *v = (*v - mean) * inv_std * g + s;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Returns `(mean, 1/sqrt(var + eps))` of a feature row (population variance).
pub(crate) fn row_moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    map(x, |v| v * normal_cdf(v))
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

pub fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

/// Column-wise concatenation of matrices with equal row counts.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return dim_err("concat_cols of zero tensors");
    };
    let rows = first.rows();
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = p.expect_matrix("concat_cols")?;
        if r != rows {
            return dim_err(format!("concat_cols row mismatch {r} vs {rows}"));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![rows, total], out)
}
