//! Versioned JSON reports and run manifests.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use ldm_core::pipeline::{EvalReport, ScalePlan, TrainingSummary};
use ldm_core::LdmConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dataset::DatasetFingerprint;

pub const SCHEMA_VERSION: u32 = 1;
pub const SIGNIFICANT_DIGITS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    pub config: LdmConfig,
    pub plan: ScalePlan,
    pub training: Option<TrainingSummary>,
    pub ldm: EvalReport,
    /// Direct single-scale linear reference under the same split.
    pub baseline: Option<EvalReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub ingest_seconds: f64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub total_seconds: f64,
    pub peak_rss_kb: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub dataset: DatasetFingerprint,
    pub seed: u64,
    pub threads: usize,
    pub timings: Timings,
}

/// Peak resident set size of this process in kB (`VmHWM`), 0 when unavailable.
pub fn peak_rss_kb() -> u64 {
    fs::read_to_string("/proc/self/status")
        .ok()
        .and_then(|s| {
            s.lines()
                .find_map(|l| l.strip_prefix("VmHWM:"))
                .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
        })
        .unwrap_or(0)
}

pub fn round_significant(x: f64, digits: usize) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", digits.saturating_sub(1), x).parse().unwrap_or(x)
}

/// Sorts object keys and rounds every non-integer number.
pub fn canonicalize(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(
                entries
                    .into_iter()
                    .map(|(k, v)| (k, canonicalize(v)))
                    .collect::<Map<_, _>>(),
            )
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonicalize).collect()),
        Value::Number(n) if n.is_f64() => {
            let x = round_significant(n.as_f64().unwrap_or(0.0), SIGNIFICANT_DIGITS);
            serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
        }
        other => other,
    }
}

/// Writes `value` as canonical pretty JSON, creating parent directories.
pub fn emit_report<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let v = canonicalize(serde_json::to_value(value)?);
    let mut text = serde_json::to_string_pretty(&v)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Value of `v` with the canonical rounding applied, for comparisons with a
/// re-read report.
pub fn rounded<T: Serialize + DeserializeOwned>(v: &T) -> Result<T> {
    Ok(serde_json::from_value(canonicalize(serde_json::to_value(v)?))?)
}

/// Removes wall-clock fields (`timing`, `timings`) at any depth.
pub fn strip_timing(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("timing");
            map.remove("timings");
            map.values_mut().for_each(strip_timing);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digit_rounding() {
        assert_eq!(round_significant(0.123456789, 6), 0.123457);
        assert_eq!(round_significant(123456789.0, 6), 123457000.0);
        assert_eq!(round_significant(-1.0e-7 * 1.23456789, 6), -1.23457e-7);
        assert_eq!(round_significant(0.0, 6), 0.0);
    }

    #[test]
    fn keys_are_sorted_and_ints_kept() {
        let v = serde_json::json!({"b": 1.0000001, "a": {"z": 3, "y": [0.1234567]}});
        let c = canonicalize(v);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(text, r#"{"a":{"y":[0.123457],"z":3},"b":1.0}"#);
    }

    #[test]
    fn peak_rss_is_reported_on_linux() {
        if Path::new("/proc/self/status").exists() {
            assert!(peak_rss_kb() > 0);
        }
    }
}
