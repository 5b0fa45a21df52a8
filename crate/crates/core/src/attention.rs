//! Attention kernels.
//!
//! * [`standard_attention`]: `softmax(QKᵀ/√d)·V`, quadratic in length. Kept as
//!   the reference and as the comparator for benchmarks.
//! * [`linear_attention`]: `softmax_row(Q)·(softmax_col(K)ᵀ·V)`, evaluated
//!   right-to-left so the cost is `O(l·d²)`.
//! * [`local_attention`]: each window of `l_win` queries attends to its own
//!   window and the two neighbouring windows (`3·l_win` keys).
//!
//! Each kernel has a `*_counted` form that tallies scalar multiplies of its
//! matrix products into an [`OpCount`]. Counts are exact and
//! hardware-independent.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, EltError, Result};
use crate::tensor::{self, Axis, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCount {
    pub multiplies: u64,
}

impl OpCount {
    fn add(&mut self, n: usize) {
        self.multiplies += n as u64;
    }
}

/// Which keys a query may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Full,
    /// Own window plus left and right neighbour windows of this size.
    Local(usize),
}

impl Band {
    /// Half-open key range visible from query `i` in a sequence of length `l`.
    pub fn key_range(self, i: usize, l: usize) -> (usize, usize) {
        match self {
            Band::Full => (0, l),
            Band::Local(w) => {
                let win = i / w;
                let lo = win.saturating_sub(1) * w;
                let hi = ((win + 2) * w).min(l);
                (lo, hi)
            }
        }
    }
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    if q.rank() != 2 || k.shape() != q.shape() || v.shape() != q.shape() {
        return dim_err(format!(
            "attention expects equal l×d_h Q, K, V; got {:?}, {:?}, {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    Ok((q.rows(), q.cols()))
}

pub fn standard_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    standard_attention_counted(q, k, v, &mut OpCount::default())
}

/// Row-at-a-time evaluation: one length-`l` score buffer, never the full
/// `l×l` matrix.
pub fn standard_attention_counted(q: &Tensor, k: &Tensor, v: &Tensor, count: &mut OpCount) -> Result<Tensor> {
    let (l, d) = check_qkv(q, k, v)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; l * d];
    let mut scores = vec![0.0; l];
    for i in 0..l {
        let qi = q.row(i);
        for (j, s) in scores.iter_mut().enumerate() {
            *s = tensor::dot(qi, k.row(j)) * scale;
        }
        tensor::softmax_in_place(&mut scores);
        let oi = &mut out[i * d..(i + 1) * d];
        for (j, &p) in scores.iter().enumerate() {
            tensor::axpy(p, v.row(j), oi);
        }
    }
    count.add(2 * l * l * d);
    Tensor::matrix(l, d, out)
}

pub fn linear_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    linear_attention_counted(q, k, v, &mut OpCount::default())
}

pub fn linear_attention_counted(q: &Tensor, k: &Tensor, v: &Tensor, count: &mut OpCount) -> Result<Tensor> {
    let (l, d) = check_qkv(q, k, v)?;
    let rq = tensor::softmax_axis(q, Axis::Row)?;
    let rk = tensor::softmax_axis(k, Axis::Column)?;
    let mut context = vec![0.0; d * d];
    tensor::matmul_tn_into(rk.data(), v.data(), &mut context, l, d, d);
    let mut out = vec![0.0; l * d];
    tensor::matmul_into(rq.data(), &context, &mut out, l, d, d);
    count.add(2 * l * d * d);
    Tensor::matrix(l, d, out)
}

pub fn local_attention(q: &Tensor, k: &Tensor, v: &Tensor, l_win: usize) -> Result<Tensor> {
    local_attention_counted(q, k, v, l_win, &mut OpCount::default())
}

/// Pads the sequence to a multiple of `l_win`, then for every window forms a
/// `3·l_win`-row key/value block from the window and its neighbours. Rows
/// outside `[0, l)` are zero-filled and their scores masked to `-∞`.
pub fn local_attention_counted(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    l_win: usize,
    count: &mut OpCount,
) -> Result<Tensor> {
    let (l, d) = check_qkv(q, k, v)?;
    if l_win == 0 {
        return Err(EltError::Config("l_win must be >= 1".into()));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let n_win = l.div_ceil(l_win);
    let padded = n_win * l_win;
    let span = 3 * l_win;
    let zero_row = vec![0.0; d];
    let in_range = |pos: isize| (pos >= 0 && (pos as usize) < l).then_some(pos as usize);
    let mut out = vec![0.0; l * d];
    let mut scores = vec![0.0; span];
    let mut acc = vec![0.0; d];
    for w in 0..n_win {
        let key_start = (w * l_win) as isize - l_win as isize;
        for qi in w * l_win..(w + 1) * l_win {
            let q_row = if qi < l { q.row(qi) } else { &zero_row[..] };
            for (s, score) in scores.iter_mut().enumerate() {
                let pos = in_range(key_start + s as isize);
                let k_row = pos.map_or(&zero_row[..], |p| k.row(p));
                let raw = tensor::dot(q_row, k_row) * scale;
                *score = if pos.is_some() { raw } else { f64::NEG_INFINITY };
            }
            tensor::softmax_in_place(&mut scores);
            acc.fill(0.0);
            for (s, &p) in scores.iter().enumerate() {
                let v_row = in_range(key_start + s as isize).map_or(&zero_row[..], |r| v.row(r));
                tensor::axpy(p, v_row, &mut acc);
            }
            if qi < l {
                out[qi * d..(qi + 1) * d].copy_from_slice(&acc);
            }
        }
    }
    count.add(2 * padded * span * d);
    Tensor::matrix(l, d, out)
}

/// Adjoint of softmax attention restricted to `band`; returns `(dQ, dK, dV)`.
pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    dout: &Tensor,
    band: Band,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (l, d) = check_qkv(q, k, v)?;
    if let Band::Local(0) = band {
        return Err(EltError::Config("l_win must be >= 1".into()));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; l * d];
    let mut dk = vec![0.0; l * d];
    let mut dv = vec![0.0; l * d];
    let mut p = Vec::with_capacity(l);
    let mut dp = Vec::with_capacity(l);
    for i in 0..l {
        let (lo, hi) = band.key_range(i, l);
        let qi = q.row(i);
        let gi = dout.row(i);
        p.clear();
        p.extend((lo..hi).map(|j| tensor::dot(qi, k.row(j)) * scale));
        tensor::softmax_in_place(&mut p);
        dp.clear();
        dp.extend((lo..hi).map(|j| tensor::dot(gi, v.row(j))));
        let weighted = tensor::dot(&p, &dp);
        let dqi = &mut dq[i * d..(i + 1) * d];
        for (n, j) in (lo..hi).enumerate() {
            let ds = p[n] * (dp[n] - weighted) * scale;
            tensor::axpy(ds, k.row(j), dqi);
            tensor::axpy(ds, qi, &mut dk[j * d..(j + 1) * d]);
            tensor::axpy(p[n], gi, &mut dv[j * d..(j + 1) * d]);
        }
    }
    Ok((
        Tensor::matrix(l, d, dq)?,
        Tensor::matrix(l, d, dk)?,
        Tensor::matrix(l, d, dv)?,
    ))
}

/// Kernel used by global (non-local) heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GlobalKind {
    #[default]
    Linear,
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_local: usize,
    pub l_win: usize,
    pub global: GlobalKind,
}

impl AttentionConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(EltError::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_local > self.n_heads {
            return Err(EltError::Config(format!(
                "n_local {} exceeds n_heads {}",
                self.n_local, self.n_heads
            )));
        }
        if self.l_win == 0 {
            return Err(EltError::Config("l_win must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether head `h` is local. Global heads come first.
    pub fn is_local(&self, h: usize) -> bool {
        h >= self.n_heads - self.n_local
    }
}

/// Query/key/value projections of one head, each `d_model × d_head`.
#[derive(Debug, Clone, Copy)]
pub struct HeadProjection {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

#[derive(Debug, Clone)]
pub struct MultiHeadParams {
    pub heads: Vec<HeadProjection>,
    /// `d_model × d_model` output projection applied after concatenation.
    pub w_o: Var,
}

/// Mixed global/local multi-head attention on a tape.
pub fn multi_head(tape: &mut Tape, x: Var, cfg: &AttentionConfig, params: &MultiHeadParams) -> Result<Var> {
    cfg.validate()?;
    if params.heads.len() != cfg.n_heads {
        return Err(EltError::Config(format!(
            "{} head projections for {} heads",
            params.heads.len(),
            cfg.n_heads
        )));
    }
    let mut outs = Vec::with_capacity(cfg.n_heads);
    for (h, proj) in params.heads.iter().enumerate() {
        let q = tape.matmul(x, proj.w_q)?;
        let k = tape.matmul(x, proj.w_k)?;
        let v = tape.matmul(x, proj.w_v)?;
        let o = if cfg.is_local(h) {
            tape.attention(q, k, v, Band::Local(cfg.l_win))?
        } else {
            match cfg.global {
                GlobalKind::Linear => tape.linear_attention(q, k, v)?,
                GlobalKind::Standard => tape.attention(q, k, v, Band::Full)?,
            }
        };
        outs.push(o);
    }
    let cat = tape.concat_cols(&outs)?;
    tape.matmul(cat, params.w_o)
}

/// Plain-tensor weights for [`multi_head_eval`].
#[derive(Debug, Clone)]
pub struct MultiHeadWeights {
    /// `(W_q, W_k, W_v)` per head.
    pub heads: Vec<(Tensor, Tensor, Tensor)>,
    pub w_o: Tensor,
}

/// Gradient-free evaluation of [`multi_head`].
pub fn multi_head_eval(x: &Tensor, cfg: &AttentionConfig, weights: &MultiHeadWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let heads = weights
        .heads
        .iter()
        .map(|(q, k, v)| HeadProjection {
            w_q: tape.constant(q.clone()),
            w_k: tape.constant(k.clone()),
            w_v: tape.constant(v.clone()),
        })
        .collect();
    let params = MultiHeadParams {
        heads,
        w_o: tape.constant(weights.w_o.clone()),
    };
    let out = multi_head(&mut tape, xv, cfg, &params)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    /// Two-loop score / softmax / weighted-sum oracle with an explicit mask.
    fn naive_masked(q: &Tensor, k: &Tensor, v: &Tensor, allowed: impl Fn(usize, usize) -> bool) -> Tensor {
        let (l, d) = (q.rows(), q.cols());
        let mut out = vec![0.0; l * d];
        for i in 0..l {
            let mut w = vec![0.0; l];
            let mut max = f64::NEG_INFINITY;
            for j in 0..l {
                if allowed(i, j) {
                    let mut s = 0.0;
                    for c in 0..d {
                        s += q.at(i, c) * k.at(j, c);
                    }
                    w[j] = s / (d as f64).sqrt();
                    max = max.max(w[j]);
                }
            }
            let mut z = 0.0;
            for j in 0..l {
                w[j] = if allowed(i, j) { (w[j] - max).exp() } else { 0.0 };
                z += w[j];
            }
            for j in 0..l {
                for c in 0..d {
                    out[i * d + c] += w[j] / z * v.at(j, c);
                }
            }
        }
        Tensor::matrix(l, d, out).unwrap()
    }

    #[test]
    fn standard_single_position_returns_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (random(&mut rng, 1, 4), random(&mut rng, 1, 4), random(&mut rng, 1, 4));
        assert!(standard_attention(&q, &k, &v).unwrap().max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn standard_identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random(&mut rng, 5, 3);
        let row = random(&mut rng, 1, 3);
        let k = Tensor::matrix(5, 3, row.data().repeat(5)).unwrap();
        let v = random(&mut rng, 5, 3);
        let out = standard_attention(&q, &k, &v).unwrap();
        for c in 0..3 {
            let mean: f64 = (0..5).map(|i| v.at(i, c)).sum::<f64>() / 5.0;
            for i in 0..5 {
                assert!((out.at(i, c) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn standard_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, k, v) = (random(&mut rng, 8, 4), random(&mut rng, 8, 4), random(&mut rng, 8, 4));
        let oracle = naive_masked(&q, &k, &v, |_, _| true);
        assert!(standard_attention(&q, &k, &v).unwrap().max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn standard_is_invariant_to_joint_key_value_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, k, v) = (random(&mut rng, 6, 3), random(&mut rng, 6, 3), random(&mut rng, 6, 3));
        let perm = [3, 0, 5, 1, 4, 2];
        let permute = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&p| t.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = standard_attention(&q, &k, &v).unwrap();
        let b = standard_attention(&q, &permute(&k), &permute(&v)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn linear_single_position_returns_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k, v) = (random(&mut rng, 1, 4), random(&mut rng, 1, 4), random(&mut rng, 1, 4));
        assert!(linear_attention(&q, &k, &v).unwrap().max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn linear_matches_quadratic_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, k, v) = (random(&mut rng, 16, 4), random(&mut rng, 16, 4), random(&mut rng, 16, 4));
        let rq = tensor::softmax_axis(&q, Axis::Row).unwrap();
        let rk = tensor::softmax_axis(&k, Axis::Column).unwrap();
        let scores = tensor::matmul(&rq, &tensor::transpose(&rk).unwrap()).unwrap();
        let quadratic = tensor::matmul(&scores, &v).unwrap();
        assert!(linear_attention(&q, &k, &v).unwrap().max_abs_diff(&quadratic) < 1e-12);
    }

    #[test]
    fn local_single_window_equals_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (q, k, v) = (random(&mut rng, 7, 4), random(&mut rng, 7, 4), random(&mut rng, 7, 4));
        let a = local_attention(&q, &k, &v, 10).unwrap();
        let b = standard_attention(&q, &k, &v).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn local_matches_band_masked_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (l, w) = (50, 10);
        let (q, k, v) = (random(&mut rng, l, 4), random(&mut rng, l, 4), random(&mut rng, l, 4));
        let oracle = naive_masked(&q, &k, &v, |i, j| (i / w).abs_diff(j / w) <= 1);
        assert!(local_attention(&q, &k, &v, w).unwrap().max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn local_ignores_positions_two_windows_away() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (l, w) = (40, 5);
        let (q, k, v) = (random(&mut rng, l, 3), random(&mut rng, l, 3), random(&mut rng, l, 3));
        let base = local_attention(&q, &k, &v, w).unwrap();
        let p = 22;
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for c in 0..3 {
            k2.data_mut()[p * 3 + c] += 3.0;
            v2.data_mut()[p * 3 + c] -= 2.0;
        }
        let pert = local_attention(&q, &k2, &v2, w).unwrap();
        for i in 0..l {
            if (i / w).abs_diff(p / w) >= 2 {
                assert_eq!(base.row(i), pert.row(i), "row {i} changed");
            }
        }
    }

    #[test]
    fn multiply_counts_follow_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (l, d) = (64, 8);
        let (q, k, v) = (random(&mut rng, l, d), random(&mut rng, l, d), random(&mut rng, l, d));
        let mut c = OpCount::default();
        standard_attention_counted(&q, &k, &v, &mut c).unwrap();
        assert_eq!(c.multiplies, (2 * l * l * d) as u64);
        let mut c = OpCount::default();
        linear_attention_counted(&q, &k, &v, &mut c).unwrap();
        assert_eq!(c.multiplies, (2 * l * d * d) as u64);
        let mut c = OpCount::default();
        local_attention_counted(&q, &k, &v, 16, &mut c).unwrap();
        assert_eq!(c.multiplies, (6 * l * 16 * d) as u64);
    }

    #[test]
    fn attention_config_validation() {
        let ok = AttentionConfig {
            d_model: 8,
            n_heads: 4,
            n_local: 2,
            l_win: 3,
            global: GlobalKind::Linear,
        };
        assert!(ok.validate().is_ok());
        assert!(AttentionConfig { n_local: 5, ..ok }.validate().is_err());
        assert!(AttentionConfig { d_model: 9, ..ok }.validate().is_err());
        assert!(AttentionConfig { l_win: 0, ..ok }.validate().is_err());
        assert!(!ok.is_local(1) && ok.is_local(2));
    }

    fn weights(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> MultiHeadWeights {
        let dh = d / heads;
        MultiHeadWeights {
            heads: (0..heads)
                .map(|_| (random(rng, d, dh), random(rng, d, dh), random(rng, d, dh)))
                .collect(),
            w_o: random(rng, d, d),
        }
    }

    #[test]
    fn multi_head_all_global_is_concatenated_linear_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = AttentionConfig {
            d_model: 8,
            n_heads: 2,
            n_local: 0,
            l_win: 3,
            global: GlobalKind::Linear,
        };
        let x = random(&mut rng, 10, 8);
        let mut w = weights(&mut rng, 8, 2);
        w.w_o = Tensor::identity(8);
        let out = multi_head_eval(&x, &cfg, &w).unwrap();
        let heads: Vec<Tensor> = w
            .heads
            .iter()
            .map(|(wq, wk, wv)| {
                let q = tensor::matmul(&x, wq).unwrap();
                let k = tensor::matmul(&x, wk).unwrap();
                let v = tensor::matmul(&x, wv).unwrap();
                linear_attention(&q, &k, &v).unwrap()
            })
            .collect();
        let expect = tensor::concat_cols(&heads.iter().collect::<Vec<_>>()).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn multi_head_single_local_head_with_identity_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = AttentionConfig {
            d_model: 4,
            n_heads: 1,
            n_local: 1,
            l_win: 3,
            global: GlobalKind::Linear,
        };
        let x = random(&mut rng, 11, 4);
        let mut w = weights(&mut rng, 4, 1);
        w.w_o = Tensor::identity(4);
        let out = multi_head_eval(&x, &cfg, &w).unwrap();
        let (wq, wk, wv) = &w.heads[0];
        let q = tensor::matmul(&x, wq).unwrap();
        let k = tensor::matmul(&x, wk).unwrap();
        let v = tensor::matmul(&x, wv).unwrap();
        assert!(out.max_abs_diff(&local_attention(&q, &k, &v, 3).unwrap()) < 1e-14);
    }
}
