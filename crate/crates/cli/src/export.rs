//! Per-component CSV export of a multiscale decomposition.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use ldm_core::logsparse::TruncationPlan;
use ldm_core::multiscale::{decompose_channel, dominant_period, spectral_forecastability};
use ldm_core::{ComponentKind, ScaleSet, TimeSeries};
use serde::{Deserialize, Serialize};

use crate::report::{emit_report, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub level: usize,
    pub kind: ComponentKind,
    pub rate: usize,
    pub length: usize,
    pub kept_length: usize,
    /// Original time index of the first sample.
    pub offset: usize,
    pub file: String,
    /// In original time steps.
    pub dominant_period: Option<f64>,
    pub forecastability: Option<f64>,
    pub constant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSummary {
    pub name: String,
    pub forecastability: Option<f64>,
    pub dominant_period: Option<f64>,
    pub components: Vec<ComponentSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionSidecar {
    pub schema_version: u32,
    pub source: String,
    pub length: usize,
    pub scales: Vec<usize>,
    pub eta: f64,
    pub channels: Vec<ChannelSummary>,
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn spectra(s: &[f64], rate: usize) -> (Option<f64>, Option<f64>, bool) {
    match spectral_forecastability(s) {
        Ok(f) if f.constant => (None, Some(f.value), true),
        Ok(f) => (dominant_period(s, rate).ok().map(|p| p.0), Some(f.value), false),
        Err(_) => (None, None, false),
    }
}

/// Writes `<channel>_level<n>.csv` with columns `original_time_index,value`
/// for every component, plus `decomposition.json`. Pooled samples are indexed
/// by the start of the block they average.
pub fn export_decomposition(
    series: &TimeSeries,
    columns: &[String],
    ss: &ScaleSet,
    out_dir: &Path,
) -> Result<DecompositionSidecar> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let len = series.len();
    let plan = TruncationPlan::new(ss, len)?;
    let depth = ss.depth();
    let mut channels = Vec::with_capacity(series.channels());
    for (c, values) in series.values().iter().enumerate() {
        let name = columns.get(c).cloned().unwrap_or_else(|| format!("c{c}"));
        let comps = decompose_channel(values, ss)?;
        let mut summaries = Vec::with_capacity(comps.len());
        for (level, comp) in comps.iter().enumerate() {
            let rate = ss.rate(level);
            let offset = len - comp.len() * rate;
            let file = format!("{}_level{level}.csv", file_stem(&name));
            let mut w = csv::Writer::from_path(out_dir.join(&file))?;
            w.write_record(["original_time_index", "value"])?;
            for (k, v) in comp.iter().enumerate() {
                w.write_record([(offset + k * rate).to_string(), v.to_string()])?;
            }
            w.flush()?;
            let (dominant_period, forecastability, constant) = spectra(comp, rate);
            summaries.push(ComponentSummary {
                level,
                kind: if level == depth {
                    ComponentKind::Trend
                } else {
                    ComponentKind::Detail
                },
                rate,
                length: comp.len(),
                kept_length: plan.kept_lengths[level],
                offset,
                file,
                dominant_period,
                forecastability,
                constant,
            });
        }
        let (dominant_period, forecastability, _) = spectra(values, 1);
        channels.push(ChannelSummary {
            name,
            forecastability,
            dominant_period,
            components: summaries,
        });
    }
    let sidecar = DecompositionSidecar {
        schema_version: SCHEMA_VERSION,
        source: series.name().to_string(),
        length: len,
        scales: ss.scales().to_vec(),
        eta: ss.eta(),
        channels,
    };
    emit_report(&sidecar, &out_dir.join("decomposition.json"))?;
    Ok(sidecar)
}
