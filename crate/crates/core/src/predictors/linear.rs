//! Direct multi-output linear predictor fitted in closed form.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LdmError, Result};

/// `y = W x + b` with `W: horizon x input_len`, stored with the bias in one
/// flat parameter vector `[W row-major | b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor {
    input_len: usize,
    horizon: usize,
    params: Vec<f64>,
    pub ridge_lambda: f64,
}

impl LinearPredictor {
    pub fn zeros(input_len: usize, horizon: usize) -> Self {
        Self {
            input_len,
            horizon,
            params: vec![0.0; input_len * horizon + horizon],
            ridge_lambda: 0.0,
        }
    }

    pub fn from_parts(weights: Vec<f64>, bias: Vec<f64>, input_len: usize) -> Result<Self> {
        let horizon = bias.len();
        if weights.len() != horizon * input_len {
            return Err(LdmError::shape(
                format!("{horizon}x{input_len} weights"),
                format!("{} weights", weights.len()),
            ));
        }
        let mut params = weights;
        params.extend(bias);
        Ok(Self {
            input_len,
            horizon,
            params,
            ridge_lambda: 0.0,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn weights(&self) -> &[f64] {
        &self.params[..self.input_len * self.horizon]
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[self.input_len * self.horizon..]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_len {
            return Err(LdmError::shape(
                format!("{} inputs", self.input_len),
                format!("{} inputs", x.len()),
            ));
        }
        Ok(self.predict_unchecked(x))
    }

    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.weights()
            .chunks_exact(self.input_len)
            .zip(self.bias())
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Accumulates `dL/dW += g x^T` and `dL/db += g`.
    pub(crate) fn backward(&self, x: &[f64], grad_out: &[f64], grads: &mut [f64]) {
        let (gw, gb) = grads.split_at_mut(self.input_len * self.horizon);
        for ((row, g), b) in gw.chunks_exact_mut(self.input_len).zip(grad_out).zip(gb) {
            for (r, v) in row.iter_mut().zip(x) {
                *r += g * v;
            }
            *b += g;
        }
    }
}

const CHUNK: usize = 256;

/// Streaming sufficient statistics for ridge regression with an intercept.
///
/// Rows are shifted by the first observed row before accumulation, which
/// leaves the centered Gram matrices unchanged and limits cancellation.
#[derive(Debug, Clone)]
pub struct RidgeAccumulator {
    input_len: usize,
    horizon: usize,
    n: usize,
    shift_x: Vec<f64>,
    shift_y: Vec<f64>,
    sum_x: Vec<f64>,
    sum_y: Vec<f64>,
    xtx: DMatrix<f64>,
    xty: DMatrix<f64>,
    buf_x: Vec<f64>,
    buf_y: Vec<f64>,
}

impl RidgeAccumulator {
    pub fn new(input_len: usize, horizon: usize) -> Self {
        Self {
            input_len,
            horizon,
            n: 0,
            shift_x: Vec::new(),
            shift_y: Vec::new(),
            sum_x: vec![0.0; input_len],
            sum_y: vec![0.0; horizon],
            xtx: DMatrix::zeros(input_len, input_len),
            xty: DMatrix::zeros(input_len, horizon),
            buf_x: Vec::with_capacity(CHUNK * input_len),
            buf_y: Vec::with_capacity(CHUNK * horizon),
        }
    }

    /// Statistics of every stride-1 window `(z[t..t+L], z[t+L..t+L+H])`,
    /// `t in 0..windows`, of each channel, without materializing the rows.
    ///
    /// Window Gram matrices of a sliding window satisfy
    /// `G[i+1][j+1] = G[i][j] + z[T+i] z[T+j] - z[i] z[j]`, so the cost is
    /// `O(T (L+H) + (L+H)^2)` per channel instead of `O(T (L+H)^2)`.
    pub fn from_sliding(channels: &[&[f64]], input_len: usize, horizon: usize, windows: usize) -> Result<Self> {
        let d = input_len + horizon;
        let mut acc = Self::new(input_len, horizon);
        if windows == 0 || channels.is_empty() {
            return Ok(acc);
        }
        for (c, z) in channels.iter().enumerate() {
            if z.len() < windows - 1 + d {
                return Err(LdmError::InsufficientData {
                    required: windows - 1 + d,
                    actual: z.len(),
                });
            }
            if let Some(i) = z.iter().position(|v| !v.is_finite()) {
                return Err(LdmError::NonFinite { channel: c, index: i });
            }
        }
        let shift = channels[0][0];
        acc.shift_x = vec![shift; input_len];
        acc.shift_y = vec![shift; horizon];
        let mut gram = vec![0.0; d * d];
        let mut sums = vec![0.0; d];
        for z in channels {
            let z: Vec<f64> = z[..windows - 1 + d].iter().map(|v| v - shift).collect();
            let t = windows;
            // First row and first column.
            let mut row0 = vec![0.0; d];
            for (j, r) in row0.iter_mut().enumerate() {
                *r = z[..t].iter().zip(&z[j..j + t]).map(|(a, b)| a * b).sum();
            }
            let mut g = vec![0.0; d * d];
            for j in 0..d {
                g[j] = row0[j];
                g[j * d] = row0[j];
            }
            for i in 0..d - 1 {
                for j in i..d - 1 {
                    let v = g[i * d + j] + z[t + i] * z[t + j] - z[i] * z[j];
                    g[(i + 1) * d + j + 1] = v;
                    g[(j + 1) * d + i + 1] = v;
                }
            }
            let mut s: f64 = z[..t].iter().sum();
            for k in 0..d {
                sums[k] += s;
                if k + 1 < d {
                    s += z[t + k] - z[k];
                }
            }
            for (a, b) in gram.iter_mut().zip(&g) {
                *a += b;
            }
        }
        acc.n = windows * channels.len();
        acc.sum_x.copy_from_slice(&sums[..input_len]);
        acc.sum_y.copy_from_slice(&sums[input_len..]);
        for i in 0..input_len {
            for j in 0..input_len {
                acc.xtx[(i, j)] = gram[i * d + j];
            }
            for k in 0..horizon {
                acc.xty[(i, k)] = gram[i * d + input_len + k];
            }
        }
        Ok(acc)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn push(&mut self, x: &[f64], y: &[f64]) -> Result<()> {
        if x.len() != self.input_len || y.len() != self.horizon {
            return Err(LdmError::shape(
                format!("({}, {})", self.input_len, self.horizon),
                format!("({}, {})", x.len(), y.len()),
            ));
        }
        if let Some(i) = x.iter().chain(y).position(|v| !v.is_finite()) {
            return Err(LdmError::NonFinite { channel: 0, index: i });
        }
        if self.n == 0 {
            self.shift_x = x.to_vec();
            self.shift_y = y.to_vec();
        }
        self.n += 1;
        for ((s, v), o) in self.sum_x.iter_mut().zip(x).zip(&self.shift_x) {
            *s += v - o;
        }
        for ((s, v), o) in self.sum_y.iter_mut().zip(y).zip(&self.shift_y) {
            *s += v - o;
        }
        self.buf_x.extend(x.iter().zip(&self.shift_x).map(|(v, o)| v - o));
        self.buf_y.extend(y.iter().zip(&self.shift_y).map(|(v, o)| v - o));
        if self.buf_x.len() == CHUNK * self.input_len {
            self.flush();
        }
        Ok(())
    }

    fn flush(&mut self) {
        let rows = self.buf_x.len() / self.input_len;
        if rows == 0 {
            return;
        }
        let bx = DMatrix::from_row_slice(rows, self.input_len, &self.buf_x);
        let by = DMatrix::from_row_slice(rows, self.horizon, &self.buf_y);
        self.xtx.gemm_tr(1.0, &bx, &bx, 1.0);
        self.xty.gemm_tr(1.0, &bx, &by, 1.0);
        self.buf_x.clear();
        self.buf_y.clear();
    }

    /// Centered normal equations `(A, B)` with `A = Xc^T Xc`, `B = Xc^T Yc`.
    pub fn centered_normal_equations(&mut self) -> (DMatrix<f64>, DMatrix<f64>) {
        self.flush();
        let n = self.n as f64;
        let mx = nalgebra::DVector::from_iterator(self.input_len, self.sum_x.iter().map(|s| s / n));
        let my = nalgebra::DVector::from_iterator(self.horizon, self.sum_y.iter().map(|s| s / n));
        let a = &self.xtx - (&mx * mx.transpose()) * n;
        let b = &self.xty - (&mx * my.transpose()) * n;
        (a, b)
    }

    /// Solves `(Xc^T Xc + lambda I) W^T = Xc^T Yc` and recovers the intercept
    /// from the means.
    pub fn solve(mut self, lambda: f64) -> Result<LinearPredictor> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(LdmError::param("ridge_lambda", "must be finite and >= 0"));
        }
        if self.n == 0 {
            return Err(LdmError::Empty("no training rows".into()));
        }
        let (mut a, b) = self.centered_normal_equations();
        for i in 0..self.input_len {
            a[(i, i)] += lambda;
        }
        let chol = a.cholesky().ok_or_else(|| {
            LdmError::Singular(format!(
                "normal equations are not positive definite at lambda = {lambda}; use lambda > 0"
            ))
        })?;
        let wt = chol.solve(&b);
        if wt.iter().any(|v| !v.is_finite()) {
            return Err(LdmError::Singular("non-finite ridge solution".into()));
        }
        let n = self.n as f64;
        let mut weights = Vec::with_capacity(self.input_len * self.horizon);
        let mut bias = Vec::with_capacity(self.horizon);
        for h in 0..self.horizon {
            let col = wt.column(h);
            weights.extend(col.iter());
            // b = mean(y) - w . mean(x), in unshifted coordinates.
            let mean_y = self.shift_y[h] + self.sum_y[h] / n;
            let wx: f64 = col
                .iter()
                .zip(self.shift_x.iter().zip(&self.sum_x))
                .map(|(w, (o, s))| w * (o + s / n))
                .sum();
            bias.push(mean_y - wx);
        }
        let mut model = LinearPredictor::from_parts(weights, bias, self.input_len)?;
        model.ridge_lambda = lambda;
        Ok(model)
    }
}

/// Closed-form ridge fit on row-major samples `x: n x L`, `y: n x H`.
pub fn fit_linear_ridge(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> Result<LinearPredictor> {
    if x.is_empty() {
        return Err(LdmError::Empty("no training rows".into()));
    }
    if x.len() != y.len() {
        return Err(LdmError::shape(
            format!("{} targets", x.len()),
            format!("{} targets", y.len()),
        ));
    }
    let mut acc = RidgeAccumulator::new(x[0].len(), y[0].len());
    for (a, b) in x.iter().zip(y) {
        acc.push(a, b)?;
    }
    acc.solve(lambda)
}
