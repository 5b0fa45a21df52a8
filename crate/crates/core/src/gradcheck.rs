//! Central-difference validation of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::{EltError, Result};
use crate::params::{BoundParams, ParameterStore};

/// Floor on the denominator of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error over every scalar of every parameter.
    pub max_rel_error: f64,
    /// `(parameter name, max relative error)` in store order.
    pub per_parameter: Vec<(String, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / REL_ERR_FLOOR.max(analytic.abs() + numeric.abs())
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with the given `step`, perturbing every scalar of
/// every parameter in `params`.
pub fn finite_diff_check<F>(params: &ParameterStore, f: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(EltError::Usage(format!("finite-difference step must be > 0, got {step}")));
    }
    let eval = |store: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let out = f(&mut tape, &bound)?;
        tape.value(out).item()
    };

    let base = eval(params)?;
    if eval(params)?.to_bits() != base.to_bits() {
        return Err(EltError::Usage("objective is not deterministic".into()));
    }

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    let mut grads = tape.backward(loss)?;
    let analytic = bound.collect_grads(params, &mut grads);

    let mut probe = params.clone();
    let mut per_parameter = Vec::with_capacity(params.len());
    let mut max_rel_error: f64 = 0.0;
    for (idx, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..grad.len() {
            let orig = params.value(idx).data()[j];
            probe.value_mut(idx).data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe.value_mut(idx).data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe.value_mut(idx).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[j], numeric));
        }
        max_rel_error = max_rel_error.max(worst);
        per_parameter.push((params.name(idx).to_string(), worst));
    }
    Ok(GradCheckReport {
        max_rel_error,
        per_parameter,
    })
}
