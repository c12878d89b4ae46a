//! Logsparse tail truncation: component `n` keeps only its most recent
//! `min(floor(p_n / eta), L_n)` samples.

use serde::{Deserialize, Serialize};

use crate::error::{LdmError, Result};
use crate::multiscale::{validate_eta, Component, Decomposition, ScaleSet};

/// Kept length for a component of `full_len` samples at scale `scale`.
pub fn truncate_length(scale: usize, full_len: usize, eta: f64) -> Result<usize> {
    validate_eta(eta)?;
    if scale == 0 || full_len == 0 {
        return Err(LdmError::param(
            "truncate_length",
            "scale and component length must be >= 1",
        ));
    }
    // Relative slack so that rational etas such as 1/3 do not floor one short.
    let budget = (scale as f64 / eta * (1.0 + 1e-12)).floor();
    let budget = if budget >= full_len as f64 {
        full_len
    } else {
        budget as usize
    };
    Ok(budget.clamp(1, full_len))
}

/// Scale that sets the truncation budget of component `level`. The
/// full-resolution detail borrows the finest scale.
pub fn budget_scale(ss: &ScaleSet, level: usize) -> usize {
    ss.scales()[level.max(1) - 1]
}

/// Per-level truncation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationPlan {
    pub eta: f64,
    pub budget_scales: Vec<usize>,
    pub full_lengths: Vec<usize>,
    pub kept_lengths: Vec<usize>,
}

impl TruncationPlan {
    pub fn new(ss: &ScaleSet, source_len: usize) -> Result<Self> {
        let levels = 0..=ss.depth();
        let budget_scales: Vec<usize> = levels.clone().map(|n| budget_scale(ss, n)).collect();
        let full_lengths: Vec<usize> = levels.map(|n| ss.full_length(source_len, n)).collect();
        let kept_lengths = budget_scales
            .iter()
            .zip(&full_lengths)
            .map(|(&p, &l)| truncate_length(p, l, ss.eta()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            eta: ss.eta(),
            budget_scales,
            full_lengths,
            kept_lengths,
        })
    }
}

/// Keeps the last `kept_length` samples of a component.
pub fn truncate_tail(c: &Component, ss: &ScaleSet) -> Result<Component> {
    let keep = truncate_length(budget_scale(ss, c.level), c.series.len(), ss.eta())?;
    let len = c.series.len();
    Ok(Component {
        series: c.series.slice(len - keep, len)?,
        kept_length: keep,
        ..c.clone()
    })
}

/// Truncates every component of a decomposition.
pub fn truncate_decomposition(d: &Decomposition) -> Result<Decomposition> {
    Ok(Decomposition {
        components: d
            .components
            .iter()
            .map(|c| truncate_tail(c, &d.scale_set))
            .collect::<Result<Vec<_>>>()?,
        ..d.clone()
    })
}

/// Slice-level variant used on hot paths: the last `keep` samples.
pub(crate) fn tail(s: &[f64], keep: usize) -> &[f64] {
    &s[s.len() - keep.min(s.len())..]
}
