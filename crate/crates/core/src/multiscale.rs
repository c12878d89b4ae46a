//! Moving-average filter bank with average-pool downsampling.
//!
//! Each cascade level splits the current approximation into a smoothed part
//! (centered 2 x p moving average) and a residual detail, then pools the
//! smoothed part. Window and pool factors are expressed relative to the
//! current rate so that level `n >= 1` ends up at rate `p_n / 2` with
//! `2L / p_n` samples.

use std::sync::Arc;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{LdmError, Result};
use crate::series::TimeSeries;

/// Ordered scale factors plus the logsparse sparsity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSet {
    scales: Vec<usize>,
    eta: f64,
}

impl ScaleSet {
    /// `scales` must be strictly increasing, start at an even value `>= 2`,
    /// and each must divide the next. `eta` must lie in `(0, 1]`.
    pub fn new(scales: Vec<usize>, eta: f64) -> Result<Self> {
        if scales.is_empty() {
            return Err(LdmError::param("scale_set", "at least one scale is required"));
        }
        if scales[0] < 2 || !scales[0].is_multiple_of(2) {
            return Err(LdmError::param(
                "scale_set",
                format!("finest scale must be even and >= 2, got {}", scales[0]),
            ));
        }
        for w in scales.windows(2) {
            if w[1] <= w[0] || w[1] % w[0] != 0 {
                return Err(LdmError::param(
                    "scale_set",
                    format!("{} must be a larger integer multiple of {}", w[1], w[0]),
                ));
            }
        }
        validate_eta(eta)?;
        Ok(Self { scales, eta })
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Number of scales N; a decomposition has N + 1 components.
    pub fn depth(&self) -> usize {
        self.scales.len()
    }

    /// Sampling rate of component `level` (1 at level 0, `p_n / 2` after).
    pub fn rate(&self, level: usize) -> usize {
        if level == 0 {
            1
        } else {
            self.scales[level - 1] / 2
        }
    }

    /// Length of component `level` for a source of `len` samples.
    pub fn full_length(&self, len: usize, level: usize) -> usize {
        len / self.rate(level)
    }

    /// Shortest source length whose trend keeps at least 4 samples.
    pub fn min_input_len(&self) -> usize {
        4 * self.rate(self.depth())
    }
}

pub(crate) fn validate_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(LdmError::param(
            "eta",
            format!("{eta} is outside the valid range (0, 1]"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentKind {
    Detail,
    Trend,
}

/// One decomposed component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub series: TimeSeries,
    pub kind: ComponentKind,
    pub level: usize,
    pub rate: usize,
    pub full_length: usize,
    pub kept_length: usize,
}

/// N details followed by the trend, finest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub components: Vec<Component>,
    pub source_length: usize,
    pub scale_set: ScaleSet,
}

impl Decomposition {
    pub fn trend(&self) -> &Component {
        self.components.last().expect("decomposition always has a trend")
    }

    pub fn details(&self) -> &[Component] {
        &self.components[..self.components.len() - 1]
    }
}

/// Centered 2 x p moving average: `p + 1` taps at offsets `-p/2..=p/2`, end
/// taps weighted `1/(2p)`, interior taps `1/p`. Edges are replicate-padded.
pub fn moving_average(s: &[f64], p: usize) -> Result<Vec<f64>> {
    if p < 2 || !p.is_multiple_of(2) {
        return Err(LdmError::param(
            "window",
            format!("moving-average window must be even and >= 2, got {p}"),
        ));
    }
    if s.is_empty() {
        return Err(LdmError::Empty("moving average of an empty sequence".into()));
    }
    Ok(moving_average_unchecked(s, p))
}

fn moving_average_unchecked(s: &[f64], p: usize) -> Vec<f64> {
    let n = s.len() as isize;
    let half = (p / 2) as isize;
    let at = |i: isize| s[i.clamp(0, n - 1) as usize];
    let inner = 1.0 / p as f64;
    let outer = 0.5 / p as f64;
    (0..n)
        .map(|k| {
            let mut acc = outer * (at(k - half) + at(k + half));
            if k - half + 1 >= 0 && k + half - 1 < n {
                acc += inner * s[(k - half + 1) as usize..=(k + half - 1) as usize].iter().sum::<f64>();
            } else {
                acc += inner * (-half + 1..half).map(|j| at(k + j)).sum::<f64>();
            }
            acc
        })
        .collect()
}

/// Average pooling with kernel = stride = `q`. The `len % q` oldest samples
/// are dropped so the block boundaries align with the end of the series.
pub fn avgpool_downsample(s: &[f64], q: usize) -> Result<Vec<f64>> {
    if q == 0 {
        return Err(LdmError::param("pool", "pool factor must be >= 1"));
    }
    if s.len() < q {
        return Err(LdmError::InsufficientData {
            required: q,
            actual: s.len(),
        });
    }
    Ok(avgpool_unchecked(s, q))
}

fn avgpool_unchecked(s: &[f64], q: usize) -> Vec<f64> {
    let skip = s.len() % q;
    let inv = 1.0 / q as f64;
    s[skip..].chunks_exact(q).map(|b| b.iter().sum::<f64>() * inv).collect()
}

/// One cascade step on a single channel.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeLevel {
    /// Input approximation at this level.
    pub approx: Vec<f64>,
    /// Low-pass output (same length as `approx`).
    pub smoothed: Vec<f64>,
    /// `approx - smoothed`.
    pub detail: Vec<f64>,
    pub rate: usize,
    pub window: usize,
    pub pool: usize,
}

fn check_input(len: usize, ss: &ScaleSet) -> Result<()> {
    if len < ss.min_input_len() {
        return Err(LdmError::InsufficientData {
            required: ss.min_input_len(),
            actual: len,
        });
    }
    Ok(())
}

/// Full cascade for one channel, exposing every intermediate signal. The
/// final approximation (the trend) is returned alongside the levels.
pub fn cascade(s: &[f64], ss: &ScaleSet) -> Result<(Vec<CascadeLevel>, Vec<f64>)> {
    check_input(s.len(), ss)?;
    let mut levels = Vec::with_capacity(ss.depth());
    let mut approx = s.to_vec();
    let mut rate = 1;
    for &p in ss.scales() {
        let window = p / rate;
        let pool = (p / 2) / rate;
        let smoothed = moving_average_unchecked(&approx, window);
        let detail: Vec<f64> = approx.iter().zip(&smoothed).map(|(a, t)| a - t).collect();
        let next = avgpool_unchecked(&smoothed, pool);
        levels.push(CascadeLevel {
            approx,
            smoothed,
            detail,
            rate,
            window,
            pool,
        });
        approx = next;
        rate = p / 2;
    }
    Ok((levels, approx))
}

/// Components of a single channel: N details then the trend.
pub fn decompose_channel(s: &[f64], ss: &ScaleSet) -> Result<Vec<Vec<f64>>> {
    let (levels, trend) = cascade(s, ss)?;
    let mut out: Vec<Vec<f64>> = levels.into_iter().map(|l| l.detail).collect();
    out.push(trend);
    Ok(out)
}

/// Decomposes every channel independently.
pub fn decompose(s: &TimeSeries, ss: &ScaleSet) -> Result<Decomposition> {
    check_input(s.len(), ss)?;
    let per_channel = s
        .values()
        .iter()
        .map(|ch| decompose_channel(ch, ss))
        .collect::<Result<Vec<_>>>()?;
    let n = ss.depth();
    let components = (0..=n)
        .map(|level| {
            let values: Vec<Vec<f64>> = per_channel.iter().map(|c| c[level].clone()).collect();
            let len = values[0].len();
            let rate = ss.rate(level);
            Ok(Component {
                series: TimeSeries::new(values, rate * s.rate(), format!("{}/L{level}", s.name()))?,
                kind: if level == n {
                    ComponentKind::Trend
                } else {
                    ComponentKind::Detail
                },
                level,
                rate,
                full_length: len,
                kept_length: len,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Decomposition {
        components,
        source_length: s.len(),
        scale_set: ss.clone(),
    })
}

/// Inverse of one split: `smoothed + detail`.
pub fn reconstruct_level(smoothed: &[f64], detail: &[f64]) -> Result<Vec<f64>> {
    if smoothed.len() != detail.len() {
        return Err(LdmError::shape(
            format!("{} samples", smoothed.len()),
            format!("{} samples", detail.len()),
        ));
    }
    Ok(smoothed.iter().zip(detail).map(|(a, b)| a + b).collect())
}

/// Endpoint-aligned linear interpolation from `s.len()` to `target` samples.
pub fn linear_interpolate(s: &[f64], target: usize) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Err(LdmError::Empty("interpolation of an empty sequence".into()));
    }
    if target == 0 {
        return Err(LdmError::param("target", "must be >= 1"));
    }
    Ok(interpolation_weights(s.len(), target)
        .map(|(i, w)| {
            if w == 0.0 {
                s[i]
            } else {
                s[i] * (1.0 - w) + s[i + 1] * w
            }
        })
        .collect())
}

/// For each output sample, the left input index and the weight of its right
/// neighbour. Shared by the forward map and its adjoint.
pub(crate) fn interpolation_weights(a: usize, b: usize) -> impl Iterator<Item = (usize, f64)> {
    (0..b).map(move |j| {
        if a == 1 || b == 1 {
            return (0, 0.0);
        }
        if a == b {
            return (j, 0.0);
        }
        let num = j * (a - 1);
        let den = b - 1;
        let i = num / den;
        if i >= a - 1 {
            (a - 1, 0.0)
        } else {
            (i, (num % den) as f64 / den as f64)
        }
    })
}

/// Adjoint of [`linear_interpolate`]: maps a gradient over `target` outputs
/// back to the `len` inputs.
pub fn linear_interpolate_adjoint(grad: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (g, (i, w)) in grad.iter().zip(interpolation_weights(len, grad.len())) {
        if w == 0.0 {
            out[i] += g;
        } else {
            out[i] += g * (1.0 - w);
            out[i + 1] += g * w;
        }
    }
    out
}

/// Spectral forecastability of one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Forecastability {
    pub value: f64,
    /// The mean-removed input was identically zero; `value` is 1 by convention.
    pub constant: bool,
}

const MIN_SPECTRAL_LEN: usize = 8;

fn power_spectrum(s: &[f64]) -> Vec<f64> {
    let n = s.len();
    let mean = s.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = s.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    let fft: Arc<dyn rustfft::Fft<f64>> = FftPlanner::new().plan_fft_forward(n);
    fft.process(&mut buf);
    buf[1..=n / 2].iter().map(|c| c.norm_sqr()).collect()
}

/// `1 - H(P) / ln(bins)` where `P` is the normalized power spectrum over the
/// positive frequencies `1..=n/2` of the mean-removed sequence.
pub fn spectral_forecastability(s: &[f64]) -> Result<Forecastability> {
    if s.len() < MIN_SPECTRAL_LEN {
        return Err(LdmError::InsufficientData {
            required: MIN_SPECTRAL_LEN,
            actual: s.len(),
        });
    }
    let power = power_spectrum(s);
    let total: f64 = power.iter().sum();
    let scale = s.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    if total <= (1e-12 * scale).powi(2) * s.len() as f64 {
        return Ok(Forecastability {
            value: 1.0,
            constant: true,
        });
    }
    let entropy: f64 = power
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| {
            let q = p / total;
            -q * q.ln()
        })
        .sum();
    let value = 1.0 - entropy / (power.len() as f64).ln();
    Ok(Forecastability {
        value: value.clamp(0.0, 1.0),
        constant: false,
    })
}

/// Period (in original time steps) of the strongest positive-frequency bin,
/// with the bin index. `rate` converts samples to original steps.
pub fn dominant_period(s: &[f64], rate: usize) -> Result<(f64, usize)> {
    if s.len() < 4 {
        return Err(LdmError::InsufficientData {
            required: 4,
            actual: s.len(),
        });
    }
    let power = power_spectrum(s);
    let (idx, _) = power.iter().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |best, (i, &p)| if p > best.1 { (i, p) } else { best },
    );
    let bin = idx + 1;
    Ok((s.len() as f64 / bin as f64 * rate as f64, bin))
}
