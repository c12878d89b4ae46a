//! Benchmark fixtures shared by the criterion targets.

use std::f64::consts::TAU;

use ldm_core::TimeSeries;

/// Noise-free two-period signal with a slow ramp.
pub fn two_period(len: usize) -> Vec<f64> {
    (0..len)
        .map(|t| {
            let t = t as f64;
            (TAU * t / 24.0).sin() + (TAU * t / 168.0).sin() + 0.001 * t + 0.05 * (t * 0.37).sin()
        })
        .collect()
}

pub fn two_period_series(len: usize) -> TimeSeries {
    TimeSeries::univariate(two_period(len), "bench").expect("finite fixture")
}
