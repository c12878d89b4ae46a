use serde::{Deserialize, Serialize};

use crate::error::{LdmError, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam optimizer state for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl TrainState {
    pub fn new(num_params: usize, lr: f64, batch_size: usize, seed: u64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(LdmError::param("lr", "learning rate must be positive"));
        }
        if batch_size == 0 {
            return Err(LdmError::param("batch_size", "must be >= 1"));
        }
        Ok(Self {
            step: 0,
            lr,
            batch_size,
            seed,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        })
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One bias-corrected Adam update of `params` along `grads`.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(LdmError::shape(
                format!("{} parameters", self.m.len()),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(LdmError::Diverged(format!("non-finite gradient at parameter {i}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
        }
        Ok(())
    }
}
