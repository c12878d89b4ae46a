//! Per-scale predictor backends behind one enum.

mod adam;
mod dual_embed;
mod gradcheck;
mod linear;

pub use adam::{TrainState, BETA1, BETA2, EPSILON};
pub use dual_embed::{unfold2d, DualEmbedConfig, DualEmbedModel, DualTape, Mat, ParamEntry, ParamInit};
pub use gradcheck::{gradcheck, GradCheckReport};
pub use linear::{fit_linear_ridge, LinearPredictor, RidgeAccumulator};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LdmError, Result};

/// A trained (or trainable) predictor for one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum PredictorModel {
    Linear(LinearPredictor),
    DualEmbed(DualEmbedModel),
}

/// Saved forward state for one sample.
#[derive(Debug, Clone)]
pub enum Tape {
    Linear(Vec<f64>),
    DualEmbed(Box<DualTape>),
}

impl PredictorModel {
    pub fn input_len(&self) -> usize {
        match self {
            Self::Linear(m) => m.input_len(),
            Self::DualEmbed(m) => m.config().input_len,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Self::Linear(m) => m.horizon(),
            Self::DualEmbed(m) => m.config().horizon,
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Self::Linear(m) => m.params(),
            Self::DualEmbed(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Self::Linear(m) => m.params_mut(),
            Self::DualEmbed(m) => m.params_mut(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Dropout rate active in training mode (0 for the linear backend).
    pub fn dropout(&self) -> f64 {
        match self {
            Self::Linear(_) => 0.0,
            Self::DualEmbed(m) => m.config().dropout,
        }
    }

    /// Eval-mode prediction for one channel.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Linear(m) => m.predict(x),
            Self::DualEmbed(m) => m.predict(x),
        }
    }

    /// Training-mode forward pass. `dropout_seed = None` disables dropout.
    pub fn forward_train(&self, x: &[f64], dropout_seed: Option<u64>) -> Result<(Vec<f64>, Tape)> {
        if x.len() != self.input_len() {
            return Err(LdmError::shape(
                format!("{} inputs", self.input_len()),
                format!("{} inputs", x.len()),
            ));
        }
        Ok(match self {
            Self::Linear(m) => (m.predict_unchecked(x), Tape::Linear(x.to_vec())),
            Self::DualEmbed(m) => {
                let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
                let (out, tape) = m.forward(x, rng.as_mut());
                (out, Tape::DualEmbed(Box::new(tape)))
            }
        })
    }

    /// Accumulates parameter gradients into `grads` given `dL/d output`.
    pub fn backward(&self, tape: &Tape, grad_out: &[f64], grads: &mut [f64]) {
        match (self, tape) {
            (Self::Linear(m), Tape::Linear(x)) => m.backward(x, grad_out, grads),
            (Self::DualEmbed(m), Tape::DualEmbed(t)) => m.backward(t, grad_out, grads),
            _ => panic!("tape does not belong to this predictor backend"),
        }
    }

    /// Restores derived state after deserialization.
    pub fn rehydrate(self) -> Result<Self> {
        Ok(match self {
            Self::DualEmbed(m) => Self::DualEmbed(m.rehydrate()?),
            other => other,
        })
    }
}

/// One supervised sample: input window and target at the predictor's scale.
pub type Sample = (Vec<f64>, Vec<f64>);

/// Mean-squared-error loss and gradient over a batch. Samples are processed
/// in parallel and reduced in a fixed order, so the result is deterministic.
pub fn batch_loss_and_grad(
    model: &PredictorModel,
    batch: &[Sample],
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(LdmError::Empty("empty batch".into()));
    }
    let scale = 1.0 / (batch.len() * model.horizon()) as f64;
    let per_sample = batch
        .par_iter()
        .enumerate()
        .map(|(i, (x, y))| {
            if y.len() != model.horizon() {
                return Err(LdmError::shape(
                    format!("{} targets", model.horizon()),
                    format!("{} targets", y.len()),
                ));
            }
            let seed = dropout_seed.map(|s| s ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let (out, tape) = model.forward_train(x, seed)?;
            let mut loss = 0.0;
            let g: Vec<f64> = out
                .iter()
                .zip(y)
                .map(|(o, t)| {
                    loss += (o - t).powi(2);
                    2.0 * (o - t) * scale
                })
                .collect();
            let mut grads = vec![0.0; model.num_params()];
            model.backward(&tape, &g, &mut grads);
            Ok((loss * scale, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut grads = vec![0.0; model.num_params()];
    for (l, g) in per_sample {
        total += l;
        grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    if !total.is_finite() {
        return Err(LdmError::Diverged(format!("loss is {total}")));
    }
    Ok((total, grads))
}

/// One Adam step on the batch MSE. Returns the pre-update loss.
pub fn train_step(model: &mut PredictorModel, state: &mut TrainState, batch: &[Sample]) -> Result<f64> {
    let seed = (model.dropout() > 0.0).then(|| state.seed.wrapping_add(state.step.wrapping_mul(0x2545_F491)));
    let (loss, grads) = batch_loss_and_grad(model, batch, seed)?;
    state.apply(model.params_mut(), &grads)?;
    Ok(loss)
}
