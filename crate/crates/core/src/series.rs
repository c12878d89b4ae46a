//! Series containers, the benchmark data protocol (normalization, chronological
//! splits, sliding windows) and point-forecast error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{LdmError, Result};

/// A multichannel series stored channel-major: `values[channel][time]`.
///
/// `rate` is the number of original time steps one sample stands for
/// (1 for raw data, larger for pooled components).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    values: Vec<Vec<f64>>,
    rate: usize,
    name: String,
}

impl TimeSeries {
    /// Validating constructor: at least one channel, one sample, equal
    /// channel lengths, finite values and `rate >= 1`.
    pub fn new(values: Vec<Vec<f64>>, rate: usize, name: impl Into<String>) -> Result<Self> {
        if values.is_empty() {
            return Err(LdmError::Empty("series has no channels".into()));
        }
        let len = values[0].len();
        if len == 0 {
            return Err(LdmError::Empty("series has no time points".into()));
        }
        if rate == 0 {
            return Err(LdmError::param("rate", "must be >= 1"));
        }
        for (c, ch) in values.iter().enumerate() {
            if ch.len() != len {
                return Err(LdmError::shape(
                    format!("{len} samples in every channel"),
                    format!("{} samples in channel {c}", ch.len()),
                ));
            }
            if let Some(i) = ch.iter().position(|v| !v.is_finite()) {
                return Err(LdmError::NonFinite { channel: c, index: i });
            }
        }
        Ok(Self {
            values,
            rate,
            name: name.into(),
        })
    }

    /// Single-channel raw series.
    pub fn univariate(values: Vec<f64>, name: impl Into<String>) -> Result<Self> {
        Self::new(vec![values], 1, name)
    }

    pub fn channels(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rate(&self) -> usize {
        self.rate
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Vec<f64>> {
        self.values
    }

    /// Time slice `[start, end)` of every channel.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(LdmError::param(
                "range",
                format!("[{start}, {end}) is not a non-empty range inside 0..{}", self.len()),
            ));
        }
        Ok(Self {
            values: self.values.iter().map(|c| c[start..end].to_vec()).collect(),
            rate: self.rate,
            name: self.name.clone(),
        })
    }

    /// Time-axis concatenation; channel counts and rates must agree.
    pub fn concat(&self, other: &TimeSeries) -> Result<Self> {
        if self.channels() != other.channels() || self.rate != other.rate {
            return Err(LdmError::shape(
                format!("{} channels at rate {}", self.channels(), self.rate),
                format!("{} channels at rate {}", other.channels(), other.rate),
            ));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.iter().chain(b).copied().collect())
            .collect();
        Ok(Self {
            values,
            rate: self.rate,
            name: self.name.clone(),
        })
    }
}

/// Per-channel standardization statistics fitted on a training segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `true` where the channel had zero variance and `std` was clamped to 1.
    pub clamped: Vec<bool>,
}

impl NormStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn any_clamped(&self) -> bool {
        self.clamped.iter().any(|&c| c)
    }
}

/// Population mean and standard deviation (divisor T) per channel.
pub fn fit_normalizer(train: &TimeSeries) -> Result<NormStats> {
    let n = train.len() as f64;
    let mut stats = NormStats {
        mean: Vec::with_capacity(train.channels()),
        std: Vec::with_capacity(train.channels()),
        clamped: Vec::with_capacity(train.channels()),
    };
    for (c, ch) in train.values().iter().enumerate() {
        if let Some(i) = ch.iter().position(|v| !v.is_finite()) {
            return Err(LdmError::NonFinite { channel: c, index: i });
        }
        let mean = ch.iter().sum::<f64>() / n;
        let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 0.0 && std.is_finite() {
            stats.std.push(std);
            stats.clamped.push(false);
        } else {
            log::warn!("channel {c} of '{}' has zero variance; std clamped to 1", train.name());
            stats.std.push(1.0);
            stats.clamped.push(true);
        }
        stats.mean.push(mean);
    }
    Ok(stats)
}

fn check_channels(s: &TimeSeries, n: &NormStats) -> Result<()> {
    if s.channels() != n.channels() {
        return Err(LdmError::shape(
            format!("{} channels", n.channels()),
            format!("{} channels", s.channels()),
        ));
    }
    Ok(())
}

/// `z = (x - mean) / std` per channel.
pub fn apply_normalizer(s: &TimeSeries, n: &NormStats) -> Result<TimeSeries> {
    check_channels(s, n)?;
    let values = s
        .values()
        .iter()
        .enumerate()
        .map(|(c, ch)| ch.iter().map(|v| (v - n.mean[c]) / n.std[c]).collect())
        .collect();
    TimeSeries::new(values, s.rate(), s.name())
}

/// `x = z * std + mean` per channel.
pub fn invert_normalizer(s: &TimeSeries, n: &NormStats) -> Result<TimeSeries> {
    check_channels(s, n)?;
    let values = s
        .values()
        .iter()
        .enumerate()
        .map(|(c, ch)| ch.iter().map(|v| v * n.std[c] + n.mean[c]).collect())
        .collect();
    TimeSeries::new(values, s.rate(), s.name())
}

/// Train/validation/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.7,
            val_frac: 0.1,
            test_frac: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn new(train_frac: f64, val_frac: f64, test_frac: f64) -> Result<Self> {
        let spec = Self {
            train_frac,
            val_frac,
            test_frac,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(LdmError::param("split", "fractions must be non-negative"));
        }
        let sum: f64 = fracs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(LdmError::param("split", format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Segment lengths for a series of `total` samples. Train and validation
    /// take `floor(T * frac)`; the remainder goes to test.
    pub fn lengths(&self, total: usize) -> (usize, usize, usize) {
        let train = (total as f64 * self.train_frac).floor() as usize;
        let val = (total as f64 * self.val_frac).floor() as usize;
        let train = train.min(total);
        let val = val.min(total - train);
        (train, val, total - train - val)
    }
}

/// Contiguous, order-preserving train/validation/test segments.
///
/// Every segment must hold at least `min_len` samples (pass `L + H` to
/// guarantee one window per segment). A zero-fraction segment is allowed to be
/// empty and is returned as `None`.
pub fn chronological_split(
    s: &TimeSeries,
    spec: &SplitSpec,
    min_len: usize,
) -> Result<(TimeSeries, Option<TimeSeries>, Option<TimeSeries>)> {
    spec.validate()?;
    let (n_train, n_val, n_test) = spec.lengths(s.len());
    let need = min_len.max(1);
    let check = |name: &str, len: usize, required: bool| -> Result<()> {
        if required && len < need {
            return Err(LdmError::param(
                "split",
                format!("{name} segment has {len} samples, needs at least {need}"),
            ));
        }
        Ok(())
    };
    check("train", n_train, true)?;
    check("validation", n_val, spec.val_frac > 0.0)?;
    check("test", n_test, spec.test_frac > 0.0)?;

    let train = s.slice(0, n_train)?;
    let val = (n_val > 0).then(|| s.slice(n_train, n_train + n_val)).transpose()?;
    let test = (n_test > 0).then(|| s.slice(n_train + n_val, s.len())).transpose()?;
    Ok((train, val, test))
}

/// An adjacent history/future pair cut from a source series.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    /// `M x L` history.
    pub x: Vec<Vec<f64>>,
    /// `M x H` future.
    pub y: Vec<Vec<f64>>,
    pub t0: usize,
}

/// Window anchors `0, stride, 2*stride, ...` with `t + L + H <= T`.
pub fn window_anchors(len: usize, input: usize, horizon: usize, stride: usize) -> Result<Vec<usize>> {
    if input == 0 || horizon == 0 {
        return Err(LdmError::param("window", "input and horizon lengths must be >= 1"));
    }
    if stride == 0 {
        return Err(LdmError::param("stride", "must be >= 1"));
    }
    if len < input + horizon {
        return Ok(Vec::new());
    }
    Ok((0..=len - input - horizon).step_by(stride).collect())
}

/// Materialized sliding windows. An empty result is returned when the series
/// is shorter than `L + H`; callers that train must treat that as an error.
pub fn make_windows(s: &TimeSeries, input: usize, horizon: usize, stride: usize) -> Result<Vec<WindowPair>> {
    Ok(window_anchors(s.len(), input, horizon, stride)?
        .into_iter()
        .map(|t| WindowPair {
            x: s.values().iter().map(|c| c[t..t + input].to_vec()).collect(),
            y: s.values()
                .iter()
                .map(|c| c[t + input..t + input + horizon].to_vec())
                .collect(),
            t0: t,
        })
        .collect())
}

fn check_same_len(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(LdmError::shape(
            format!("{} entries", y.len()),
            format!("{} entries", y_hat.len()),
        ));
    }
    if y.is_empty() {
        return Err(LdmError::Empty("metric over zero entries".into()));
    }
    Ok(())
}

/// Mean squared error over all entries.
pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_same_len(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
}

/// Mean absolute error over all entries.
pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_same_len(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uni(v: Vec<f64>) -> TimeSeries {
        TimeSeries::univariate(v, "t").unwrap()
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(TimeSeries::new(vec![], 1, "x").is_err());
        assert!(TimeSeries::new(vec![vec![]], 1, "x").is_err());
        assert!(TimeSeries::new(vec![vec![1.0]], 0, "x").is_err());
        assert!(TimeSeries::new(vec![vec![1.0], vec![1.0, 2.0]], 1, "x").is_err());
        assert_eq!(
            TimeSeries::new(vec![vec![1.0, f64::NAN]], 1, "x"),
            Err(LdmError::NonFinite { channel: 0, index: 1 })
        );
    }

    #[test]
    fn zero_variance_channel_is_clamped() {
        let n = fit_normalizer(&uni(vec![1.0; 4])).unwrap();
        assert_eq!(n.mean, vec![1.0]);
        assert_eq!(n.std, vec![1.0]);
        assert!(n.clamped[0]);
    }

    #[test]
    fn population_std() {
        let n = fit_normalizer(&uni(vec![0.0, 2.0])).unwrap();
        assert_eq!(n.mean, vec![1.0]);
        assert_eq!(n.std, vec![1.0]);
        assert!(!n.any_clamped());
        let z = apply_normalizer(&uni(vec![0.0, 2.0]), &n).unwrap();
        assert_eq!(z.channel(0), &[-1.0, 1.0]);
    }

    #[test]
    fn channels_are_independent() {
        let s = TimeSeries::new(vec![vec![0.0, 2.0], vec![10.0, 10.0]], 1, "x").unwrap();
        let n = fit_normalizer(&s).unwrap();
        assert_eq!(n.mean, vec![1.0, 10.0]);
        assert_eq!(n.clamped, vec![false, true]);
    }

    #[test]
    fn normalizer_channel_mismatch() {
        let n = fit_normalizer(&uni(vec![0.0, 2.0])).unwrap();
        let s = TimeSeries::new(vec![vec![0.0], vec![1.0]], 1, "x").unwrap();
        assert!(matches!(apply_normalizer(&s, &n), Err(LdmError::ShapeMismatch { .. })));
        assert!(invert_normalizer(&s, &n).is_err());
    }

    #[test]
    fn normalized_train_has_zero_mean() {
        let s = uni((0..97).map(|i| (i as f64 * 0.37).sin() * 5.0 + 3.0).collect());
        let n = fit_normalizer(&s).unwrap();
        let z = apply_normalizer(&s, &n).unwrap();
        let m = z.channel(0).iter().sum::<f64>() / z.len() as f64;
        assert!(m.abs() <= 1e-9);
    }

    #[test]
    fn split_lengths() {
        let spec = SplitSpec::default();
        assert_eq!(spec.lengths(100), (70, 10, 20));
        assert_eq!(spec.lengths(10), (7, 1, 2));
        let s = uni((0..10).map(f64::from).collect());
        let (tr, va, te) = chronological_split(&s, &spec, 1).unwrap();
        let joined = tr.concat(&va.unwrap()).unwrap().concat(&te.unwrap()).unwrap();
        assert_eq!(joined, s);
    }

    #[test]
    fn split_rejects_short_segments() {
        let s = uni((0..10).map(f64::from).collect());
        assert!(chronological_split(&s, &SplitSpec::default(), 2).is_err());
        assert!(SplitSpec::new(0.5, 0.5, 0.5).is_err());
        assert!(SplitSpec::new(-0.1, 0.6, 0.5).is_err());
    }

    #[test]
    fn window_enumeration() {
        let s = uni((0..5).map(f64::from).collect());
        let w = make_windows(&s, 2, 1, 1).unwrap();
        assert_eq!(w.iter().map(|w| w.t0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(w[1].x[0], vec![1.0, 2.0]);
        assert_eq!(w[1].y[0], vec![3.0]);
        assert_eq!(make_windows(&s, 3, 2, 1).unwrap().len(), 1);
        assert!(make_windows(&s, 4, 2, 1).unwrap().is_empty());
        assert!(make_windows(&s, 2, 1, 0).is_err());
    }

    #[test]
    fn stride_h_targets_do_not_overlap() {
        let s = uni((0..40).map(f64::from).collect());
        let w = make_windows(&s, 4, 3, 3).unwrap();
        for pair in w.windows(2) {
            assert!(pair[0].y[0].last().unwrap() < pair[1].y[0].first().unwrap());
        }
    }

    #[test]
    fn metric_values() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mae(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(mse(&[0.0], &[1.0, 1.0]).is_err());
        assert!(mae(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn normalizer_round_trip(v in prop::collection::vec(-1e6f64..1e6, 2..200)) {
            let s = uni(v);
            let n = fit_normalizer(&s).unwrap();
            let back = invert_normalizer(&apply_normalizer(&s, &n).unwrap(), &n).unwrap();
            for (a, b) in s.channel(0).iter().zip(back.channel(0)) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(n.std[0]).max(1.0));
            }
        }

        #[test]
        fn window_count(t in 1usize..300, l in 1usize..50, h in 1usize..50, stride in 1usize..10) {
            let n = window_anchors(t, l, h, stride).unwrap().len();
            let expected = if t >= l + h { (t - l - h) / stride + 1 } else { 0 };
            prop_assert_eq!(n, expected);
        }

        #[test]
        fn metrics_scale_and_permute(
            y in prop::collection::vec(-10.0f64..10.0, 1..40),
            e in prop::collection::vec(-1.0f64..1.0, 40),
            c in 0.1f64..5.0,
        ) {
            let e = &e[..y.len()];
            let yh: Vec<f64> = y.iter().zip(e).map(|(a, b)| a + b).collect();
            let yh_c: Vec<f64> = y.iter().zip(e).map(|(a, b)| a + c * b).collect();
            let m = mse(&y, &yh).unwrap();
            let a = mae(&y, &yh).unwrap();
            prop_assert!(m >= 0.0 && a >= 0.0);
            prop_assert!((mse(&y, &yh_c).unwrap() - c * c * m).abs() <= 1e-9 * (1.0 + m));
            prop_assert!((mae(&y, &yh_c).unwrap() - c * a).abs() <= 1e-9 * (1.0 + a));
            let mut ry = y.clone();
            let mut ryh = yh.clone();
            ry.reverse();
            ryh.reverse();
            prop_assert!((mse(&ry, &ryh).unwrap() - m).abs() <= 1e-12 * (1.0 + m));
        }
    }
}
