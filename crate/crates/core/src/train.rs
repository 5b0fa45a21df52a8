//! Mini-batch Adam on the seq2point MSE objective with a seeded validation
//! split, best-model selection and early stopping.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::WindowDataset;
use crate::error::{EltError, Result};
use crate::model::EltModel;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub val_fraction: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Fixes every source of run-to-run variation, including the wall-clock
    /// column of the history (written as 0).
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            batch: 256,
            val_fraction: 0.2,
            patience: 5,
            max_epochs: 100,
            seed: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            p.push(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                p.push(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            p.push("weight_decay must be >= 0".into());
        }
        if self.batch == 0 {
            p.push("batch must be >= 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            p.push(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        if self.patience == 0 {
            p.push("patience must be >= 1".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(EltError::Config(p.join("; ")))
        }
    }
}

/// Mean of squared differences.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(EltError::Usage(format!(
            "mse needs equal non-empty batches, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// First and second moment buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn matches(&self, params: &ParameterStore) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .enumerate()
                .all(|(i, (_, t))| self.m[i].shape() == t.shape() && self.v[i].shape() == t.shape())
    }
}

/// One bias-corrected Adam update. Weight decay, when nonzero, is added to
/// the gradient. A non-finite gradient aborts before anything is modified.
pub fn adam_step(params: &mut ParameterStore, grads: &[Tensor], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() || !state.matches(params) {
        return Err(EltError::Dimension(format!(
            "adam_step: {} parameters, {} gradients, optimizer state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.value(i).shape() {
            return Err(EltError::Dimension(format!(
                "gradient for {} has shape {:?}, parameter has {:?}",
                params.name(i),
                g.shape(),
                params.value(i).shape()
            )));
        }
        if let Some(j) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(EltError::Numeric(format!(
                "non-finite gradient for parameter {} at element {j} (step {})",
                params.name(i),
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let p = params.value_mut(i).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j] + cfg.weight_decay * p[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= cfg.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss (the initial ones when no
    /// epoch ran).
    pub best: EltModel,
    pub best_adam: AdamState,
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Seeded, disjoint train/validation split over window indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = if n < 2 {
        n
    } else {
        ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1)
    };
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Mean squared error of `model` over the windows at `indices`.
pub fn evaluate_mse(model: &EltModel, data: &WindowDataset, indices: &[usize]) -> Result<f64> {
    let mut pred = Vec::with_capacity(indices.len());
    let mut target = Vec::with_capacity(indices.len());
    for &i in indices {
        let w = data.get(i);
        pred.push(model.predict(w.input)?);
        target.push(w.label);
    }
    mse_loss(&pred, &target)
}

/// Gradient of the batch MSE and its value. Each sample gets its own tape;
/// per-sample gradients are summed in batch order.
pub fn batch_gradients(model: &EltModel, data: &WindowDataset, batch: &[usize]) -> Result<(Vec<Tensor>, f64)> {
    let params = model.params();
    let mut acc: Vec<Tensor> = params
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &i in batch {
        let w = data.get(i);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let y = model.forward(&mut tape, &bound, w.input)?;
        let diff = tape.add_scalar(y, -w.label)?;
        let sq = tape.mul(diff, diff)?;
        let l = tape.scale(sq, inv)?;
        loss += tape.value(l).item()?;
        let mut grads = tape.backward(l)?;
        for (a, g) in acc.iter_mut().zip(bound.collect_grads(params, &mut grads)) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
    Ok((acc, loss))
}

/// Trains `model` on `data`. Returns the best-validation parameters and the
/// per-epoch history.
pub fn train(model: EltModel, data: &WindowDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.input_len != model.config().input_len {
        return Err(EltError::Config(format!(
            "dataset windows have length {}, model expects {}",
            data.input_len,
            model.config().input_len
        )));
    }
    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    if train_idx.len() < cfg.batch || val_idx.is_empty() {
        return Err(EltError::Config(format!(
            "dataset too small: {} windows give {} training windows, fewer than one batch of {}",
            data.len(),
            train_idx.len(),
            cfg.batch
        )));
    }
    let mut model = model;
    let mut adam = AdamState::new(model.params());
    let mut best = model.clone();
    let mut best_adam = adam.clone();
    let mut best_epoch = None;
    let mut best_val = None::<f64>;
    let mut history = Vec::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut order = train_idx.clone();
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut weighted = 0.0;
        for batch in order.chunks(cfg.batch) {
            let (grads, loss) = batch_gradients(&model, data, batch)?;
            if !loss.is_finite() {
                return Err(EltError::Numeric(format!("training loss became {loss} in epoch {epoch}")));
            }
            adam_step(model.params_mut(), &grads, &mut adam, cfg)?;
            weighted += loss * batch.len() as f64;
        }
        let train_mse = weighted / order.len() as f64;
        let val_mse = evaluate_mse(&model, data, &val_idx)?;
        if !val_mse.is_finite() {
            return Err(EltError::Numeric(format!("validation loss became {val_mse} in epoch {epoch}")));
        }
        let seconds = if cfg.deterministic {
            0.0
        } else {
            started.elapsed().as_secs_f64()
        };
        let rec = EpochRecord {
            epoch,
            train_mse,
            val_mse,
            seconds,
        };
        log::info!("epoch {epoch}: train_mse {train_mse:.6} val_mse {val_mse:.6}");
        history.push(rec);
        if best_val.is_none_or(|b| val_mse < b) {
            best_val = Some(val_mse);
            best_epoch = Some(epoch);
            best = model.clone();
            best_adam = adam.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("early stop after epoch {epoch}; best epoch {}", best_epoch.unwrap_or(0));
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_adam,
        best_epoch,
        best_val_mse: best_val,
        history,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}

pub const HISTORY_HEADER: &str = "epoch,train_mse,val_mse,seconds";

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| EltError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| EltError::io(path, e);
    writeln!(w, "{HISTORY_HEADER}").map_err(io)?;
    for r in history {
        writeln!(w, "{},{},{},{}", r.epoch, r.train_mse, r.val_mse, r.seconds).map_err(io)?;
    }
    w.flush().map_err(io)
}
