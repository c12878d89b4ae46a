//! Central finite-difference check of analytic gradients.

use serde::{Deserialize, Serialize};

use super::{batch_loss_and_grad, PredictorModel, Sample};
use crate::error::{LdmError, Result};

const MAX_CHECKED_PARAMS: usize = 10_000;

/// Denominator floor for relative errors. Parameters whose true gradient is
/// below this magnitude are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub num_params: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Per-parameter `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub rel_errors: Vec<f64>,
}

impl GradCheckReport {
    /// Fraction of parameters with relative error at or below `tol`.
    pub fn fraction_within(&self, tol: f64) -> f64 {
        self.rel_errors.iter().filter(|&&e| e <= tol).count() as f64 / self.num_params as f64
    }
}

fn loss(model: &PredictorModel, batch: &[Sample]) -> Result<f64> {
    Ok(batch_loss_and_grad(model, batch, None)?.0)
}

/// Compares the analytic MSE gradient on `batch` with central differences of
/// width `2 * step` for every parameter. Models with dropout are rejected.
pub fn gradcheck(model: &PredictorModel, batch: &[Sample], step: f64) -> Result<GradCheckReport> {
    if model.dropout() > 0.0 {
        return Err(LdmError::param(
            "dropout",
            "gradient checks need a deterministic forward pass; set dropout to 0",
        ));
    }
    if model.num_params() > MAX_CHECKED_PARAMS {
        return Err(LdmError::param(
            "model",
            format!(
                "{} parameters exceed the check limit of {MAX_CHECKED_PARAMS}",
                model.num_params()
            ),
        ));
    }
    if step.is_nan() || step <= 0.0 {
        return Err(LdmError::param("step", "must be positive"));
    }
    let (_, analytic) = batch_loss_and_grad(model, batch, None)?;
    let mut probe = model.clone();
    let mut rel_errors = Vec::with_capacity(model.num_params());
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + step;
        let up = loss(&probe, batch)?;
        probe.params_mut()[i] = orig - step;
        let down = loss(&probe, batch)?;
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
        rel_errors.push((a - numeric).abs() / denom);
    }
    let max_rel_error = rel_errors.iter().cloned().fold(0.0, f64::max);
    let mean_rel_error = rel_errors.iter().sum::<f64>() / rel_errors.len().max(1) as f64;
    Ok(GradCheckReport {
        num_params: model.num_params(),
        max_rel_error,
        mean_rel_error,
        rel_errors,
    })
}
