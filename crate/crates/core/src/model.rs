//! The ELTransformer seq2point network.
//!
//! ```text
//! x[l] ─┬─ conv(k1) ─┐
//!       └─ conv(k2) ─┴─ concat + E_pos ─ L2 pool ─ ·W+b ─┐
//!                                                        │  × n_layers
//!       LayerNorm(X + MHA(X)) ─ LayerNorm(X + PFFN(X)) ◄─┘
//!                                                        │
//!       mean_t( ReLU(LayerNorm(X + E_rel)·W1 + b1)·W2 + b2 )  → ŷ
//! ```
//!
//! `E_rel` is stored as `⌈l_p/2⌉` rows and mirrored, so it is symmetric about
//! the midpoint by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionConfig, GlobalKind, HeadProjection, MultiHeadParams};
use crate::autograd::{Tape, Var};
use crate::error::{EltError, Result};
use crate::params::{BoundParams, ParameterStore};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_local: usize,
    pub l_win: usize,
    pub n_layers: usize,
    /// Kernel sizes of the two parallel convolutions; each yields `d_model/2` channels.
    pub conv_kernels: [usize; 2],
    pub pool_kernel: usize,
    pub pool_stride: usize,
    /// Regressor hidden width; 0 means "same as d_model".
    pub regressor_hidden: usize,
    pub global_attention: GlobalKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_len: 599,
            d_model: 256,
            n_heads: 4,
            n_local: 2,
            l_win: 20,
            n_layers: 2,
            conv_kernels: [5, 11],
            pool_kernel: 2,
            pool_stride: 2,
            regressor_hidden: 0,
            global_attention: GlobalKind::Linear,
        }
    }
}

impl ModelConfig {
    pub fn pooled_len(&self) -> usize {
        tensor::pooled_len(self.input_len, self.pool_stride.max(1))
    }

    pub fn hidden(&self) -> usize {
        if self.regressor_hidden == 0 {
            self.d_model
        } else {
            self.regressor_hidden
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_local: self.n_local,
            l_win: self.l_win,
            global: self.global_attention,
        }
    }

    /// Every violated invariant, each message prefixed by the key name.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.input_len == 0 || self.input_len.is_multiple_of(2) {
            out.push("input_len must be odd".to_string());
        }
        if self.d_model < 2 || !self.d_model.is_multiple_of(2) {
            out.push("d_model must be even and >= 2".to_string());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads.max(1)) {
            out.push(format!(
                "n_heads must divide d_model ({} / {})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_local > self.n_heads {
            out.push(format!("n_local must be <= n_heads ({} > {})", self.n_local, self.n_heads));
        }
        if self.l_win == 0 {
            out.push("l_win must be >= 1".to_string());
        }
        for k in self.conv_kernels {
            if k % 2 == 0 {
                out.push(format!("conv_kernels must be odd, got {k}"));
            }
        }
        if self.pool_kernel == 0 {
            out.push("pool_kernel must be >= 1".to_string());
        }
        if self.pool_stride == 0 {
            out.push("pool_stride must be >= 1".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(EltError::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone)]
struct LayerIdx {
    heads: Vec<[usize; 3]>,
    w_o: usize,
    norm1: [usize; 2],
    ffn: [usize; 4],
    norm2: [usize; 2],
}

#[derive(Debug, Clone)]
struct Layout {
    conv: [[usize; 2]; 2],
    pos: usize,
    embed: [usize; 2],
    layers: Vec<LayerIdx>,
    rel: usize,
    reg_norm: [usize; 2],
    reg: [usize; 4],
}

/// Model configuration plus its parameters.
#[derive(Debug, Clone)]
pub struct EltModel {
    cfg: ModelConfig,
    params: ParameterStore,
    layout: Layout,
}

/// Tape handles for one transformer block.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub attention: MultiHeadParams,
    pub norm1: (Var, Var),
    /// `(W1, b1, W2, b2)`
    pub ffn: (Var, Var, Var, Var),
    pub norm2: (Var, Var),
}

#[derive(Debug, Clone, Copy)]
pub struct ExtractorVars {
    pub conv1: (Var, Var),
    pub conv2: (Var, Var),
    pub pos: Var,
    pub w: Var,
    pub b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct RegressorVars {
    /// Half of the symmetric relative embedding, `⌈l_p/2⌉ × d_model`.
    pub rel_half: Var,
    pub norm: (Var, Var),
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-a..a)).collect()).expect("xavier shape")
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("gaussian shape")
}

impl EltModel {
    /// Builds a model with seeded random initial weights.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterStore::new();
        let d = cfg.d_model;
        let half = d / 2;
        let l = cfg.input_len;
        let lp = cfg.pooled_len();
        let dh = d / cfg.n_heads;
        let hidden = cfg.hidden();
        let ones = Tensor::full(&[d], 1.0);
        let zeros = Tensor::zeros(&[d]);

        let mut conv = [[0; 2]; 2];
        for (i, &k) in cfg.conv_kernels.iter().enumerate() {
            conv[i][0] = p.insert(format!("conv{}.filters", i + 1), xavier(&mut rng, &[k, 1, half], k, k * half))?;
            conv[i][1] = p.insert(format!("conv{}.bias", i + 1), Tensor::zeros(&[half]))?;
        }
        let pos = p.insert("embed.pos", gaussian(&mut rng, &[l, d], 0.02))?;
        let embed = [
            p.insert("embed.w", xavier(&mut rng, &[d, d], d, d))?,
            p.insert("embed.b", zeros.clone())?,
        ];
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for li in 0..cfg.n_layers {
            let pre = format!("layers.{li}");
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let mut idx = [0; 3];
                for (slot, name) in ["wq", "wk", "wv"].iter().enumerate() {
                    idx[slot] = p.insert(format!("{pre}.attn.head{h}.{name}"), xavier(&mut rng, &[d, dh], d, dh))?;
                }
                heads.push(idx);
            }
            let w_o = p.insert(format!("{pre}.attn.wo"), xavier(&mut rng, &[d, d], d, d))?;
            let norm1 = [
                p.insert(format!("{pre}.norm1.gain"), ones.clone())?,
                p.insert(format!("{pre}.norm1.shift"), zeros.clone())?,
            ];
            let ffn = [
                p.insert(format!("{pre}.ffn.w1"), xavier(&mut rng, &[d, 4 * d], d, 4 * d))?,
                p.insert(format!("{pre}.ffn.b1"), Tensor::zeros(&[4 * d]))?,
                p.insert(format!("{pre}.ffn.w2"), xavier(&mut rng, &[4 * d, d], 4 * d, d))?,
                p.insert(format!("{pre}.ffn.b2"), zeros.clone())?,
            ];
            let norm2 = [
                p.insert(format!("{pre}.norm2.gain"), ones.clone())?,
                p.insert(format!("{pre}.norm2.shift"), zeros.clone())?,
            ];
            layers.push(LayerIdx {
                heads,
                w_o,
                norm1,
                ffn,
                norm2,
            });
        }
        let rel = p.insert("regressor.rel", gaussian(&mut rng, &[lp.div_ceil(2), d], 0.02))?;
        let reg_norm = [
            p.insert("regressor.norm.gain", ones)?,
            p.insert("regressor.norm.shift", zeros)?,
        ];
        let reg = [
            p.insert("regressor.w1", xavier(&mut rng, &[d, hidden], d, hidden))?,
            p.insert("regressor.b1", Tensor::zeros(&[hidden]))?,
            p.insert("regressor.w2", xavier(&mut rng, &[hidden, 1], hidden, 1))?,
            p.insert("regressor.b2", Tensor::zeros(&[1]))?,
        ];
        Ok(EltModel {
            cfg,
            params: p,
            layout: Layout {
                conv,
                pos,
                embed,
                layers,
                rel,
                reg_norm,
                reg,
            },
        })
    }

    /// Rebuilds a model around stored parameters, checking every name and shape.
    pub fn from_params(cfg: ModelConfig, params: ParameterStore) -> Result<Self> {
        let template = EltModel::init(cfg, 0)?;
        if template.params.len() != params.len() {
            return Err(EltError::Data(format!(
                "expected {} parameter arrays, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in template.params.iter().enumerate() {
            let got = params
                .get(name)
                .ok_or_else(|| EltError::Data(format!("missing parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(EltError::Data(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
            if params.index_of(name) != Some(i) {
                return Err(EltError::Data(format!("parameter {name} out of order")));
            }
        }
        Ok(EltModel {
            cfg: template.cfg,
            params,
            layout: template.layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn extractor_vars(&self, b: &BoundParams) -> ExtractorVars {
        let l = &self.layout;
        ExtractorVars {
            conv1: (b.var(l.conv[0][0]), b.var(l.conv[0][1])),
            conv2: (b.var(l.conv[1][0]), b.var(l.conv[1][1])),
            pos: b.var(l.pos),
            w: b.var(l.embed[0]),
            b: b.var(l.embed[1]),
        }
    }

    pub fn block_vars(&self, b: &BoundParams, layer: usize) -> BlockVars {
        let li = &self.layout.layers[layer];
        BlockVars {
            attention: MultiHeadParams {
                heads: li
                    .heads
                    .iter()
                    .map(|h| HeadProjection {
                        w_q: b.var(h[0]),
                        w_k: b.var(h[1]),
                        w_v: b.var(h[2]),
                    })
                    .collect(),
                w_o: b.var(li.w_o),
            },
            norm1: (b.var(li.norm1[0]), b.var(li.norm1[1])),
            ffn: (b.var(li.ffn[0]), b.var(li.ffn[1]), b.var(li.ffn[2]), b.var(li.ffn[3])),
            norm2: (b.var(li.norm2[0]), b.var(li.norm2[1])),
        }
    }

    pub fn regressor_vars(&self, b: &BoundParams) -> RegressorVars {
        let l = &self.layout;
        RegressorVars {
            rel_half: b.var(l.rel),
            norm: (b.var(l.reg_norm[0]), b.var(l.reg_norm[1])),
            w1: b.var(l.reg[0]),
            b1: b.var(l.reg[1]),
            w2: b.var(l.reg[2]),
            b2: b.var(l.reg[3]),
        }
    }

    /// Records the full forward pass and returns the scalar prediction.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: &[f64]) -> Result<Var> {
        if x.len() != self.cfg.input_len {
            return Err(EltError::Dimension(format!(
                "input window has {} samples, model expects {}",
                x.len(),
                self.cfg.input_len
            )));
        }
        let input = tape.constant(Tensor::matrix(x.len(), 1, x.to_vec())?);
        let mut h = feature_extract(tape, input, &self.cfg, &self.extractor_vars(bound))?;
        let attn = self.cfg.attention();
        for layer in 0..self.cfg.n_layers {
            h = transformer_block(tape, h, &attn, &self.block_vars(bound, layer))?;
        }
        regress(tape, h, &self.regressor_vars(bound))
    }

    /// Gradient-free prediction for one window (normalized units).
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, x)?;
        tape.value(out).item()
    }
}

/// `Pool(Cat(Conv1(x), Conv2(x)) + E_pos)·W + b`; `x` is `l×1`.
pub fn feature_extract(tape: &mut Tape, x: Var, cfg: &ModelConfig, v: &ExtractorVars) -> Result<Var> {
    if tape.value(x).rows() != cfg.input_len {
        return Err(EltError::Dimension(format!(
            "extractor input has {} samples, expected {}",
            tape.value(x).rows(),
            cfg.input_len
        )));
    }
    let c1 = tape.conv1d(x, v.conv1.0, v.conv1.1)?;
    let c2 = tape.conv1d(x, v.conv2.0, v.conv2.1)?;
    let cat = tape.concat_cols(&[c1, c2])?;
    let with_pos = tape.add(cat, v.pos)?;
    let pooled = tape.lp_pool2(with_pos, cfg.pool_kernel, cfg.pool_stride)?;
    tape.affine(pooled, v.w, v.b)
}

/// `X₁ = LN(X + MHA(X))`, `X₂ = LN(X₁ + GELU(X₁W₁ + b₁)W₂ + b₂)`.
pub fn transformer_block(tape: &mut Tape, x: Var, attn: &AttentionConfig, v: &BlockVars) -> Result<Var> {
    let a = attention::multi_head(tape, x, attn, &v.attention)?;
    let r1 = tape.add(x, a)?;
    let x1 = tape.layer_norm(r1, v.norm1.0, v.norm1.1)?;
    let (w1, b1, w2, b2) = v.ffn;
    let inner = tape.affine(x1, w1, b1)?;
    let act = tape.gelu(inner)?;
    let ff = tape.affine(act, w2, b2)?;
    let r2 = tape.add(x1, ff)?;
    tape.layer_norm(r2, v.norm2.0, v.norm2.1)
}

/// Mean over positions of `ReLU(LN(X + E_rel)·W1 + b1)·W2 + b2`.
pub fn regress(tape: &mut Tape, x: Var, v: &RegressorVars) -> Result<Var> {
    let lp = tape.value(x).rows();
    let rel = tape.mirror_rows(v.rel_half, lp)?;
    let z = tape.add(x, rel)?;
    let zn = tape.layer_norm(z, v.norm.0, v.norm.1)?;
    let hpre = tape.affine(zn, v.w1, v.b1)?;
    let h = tape.relu(hpre)?;
    let per_pos = tape.affine(h, v.w2, v.b2)?;
    tape.mean(per_pos)
}
