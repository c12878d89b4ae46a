//! Flat `key = value` experiment configuration.
//!
//! Keys follow the published configuration table (`layers`, `d_model`,
//! `d_ff`, `n_heads`, `lr`, `batch_size`, `scale_set`, `dropout`,
//! `input_size`) plus harness keys. Any key can be overridden by an
//! environment variable named `LDM_` + the upper-cased key, e.g. `LDM_ETA`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ldm_core::{BackendKind, LdmConfig, LossMode, ScaleSet, SplitSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const ENV_PREFIX: &str = "LDM_";

pub const KEYS: &[&str] = &[
    "layers",
    "d_model",
    "d_ff",
    "n_heads",
    "lr",
    "batch_size",
    "scale_set",
    "dropout",
    "input_size",
    "horizon",
    "eta",
    "loss_mode",
    "seed",
    "stride",
    "eval_stride",
    "backend",
    "ridge_lambda",
    "split",
    "patience",
    "max_epochs",
    "patch_size",
    "data",
    "target",
    "date_column",
    "baseline",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub ldm: LdmConfig,
    /// Candidate input sizes as written; the first applies to horizons up to
    /// 192 and the second to longer ones.
    pub input_sizes: Vec<usize>,
    pub data: Option<PathBuf>,
    pub target: Option<String>,
    pub date_column: String,
    /// Also fit and report the direct linear reference.
    pub baseline: bool,
}

impl ExperimentConfig {
    /// Hex SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Parses `a/b` or a decimal.
pub fn parse_ratio(s: &str) -> Result<f64> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().with_context(|| format!("bad numerator in '{s}'"))?;
            let b: f64 = b.trim().parse().with_context(|| format!("bad denominator in '{s}'"))?;
            a / b
        }
        None => s.parse().with_context(|| format!("'{s}' is not a number"))?,
    };
    if !v.is_finite() {
        bail!("'{s}' is not finite");
    }
    Ok(v)
}

fn parse_list(s: &str, sep: char) -> Result<Vec<usize>> {
    s.trim_matches(|c| c == '{' || c == '}' || c == '[' || c == ']')
        .split(sep)
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .with_context(|| format!("'{v}' in '{s}' is not an integer"))
        })
        .collect()
}

fn parse_bool(s: &str) -> Result<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => bail!("'{s}' is not a boolean"),
    }
}

/// Reads `key = value` lines. `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected 'key = value', got '{raw}'", i + 1))?;
        let k = k.trim().to_ascii_lowercase();
        if !KEYS.contains(&k.as_str()) {
            bail!("line {}: unknown key '{k}'", i + 1);
        }
        out.insert(k, v.trim().to_string());
    }
    Ok(out)
}

/// Applies `LDM_*` overrides from `vars`.
pub fn apply_env<I>(pairs: &mut BTreeMap<String, String>, vars: I)
where
    I: IntoIterator<Item = (String, String)>,
{
    for (k, v) in vars {
        if let Some(key) = k.strip_prefix(ENV_PREFIX) {
            let key = key.to_ascii_lowercase();
            if KEYS.contains(&key.as_str()) {
                pairs.insert(key, v);
            }
        }
    }
}

/// Builds and validates the experiment configuration. Missing keys take the
/// defaults of [`LdmConfig::default`].
pub fn resolve(pairs: &BTreeMap<String, String>) -> Result<ExperimentConfig> {
    let d = LdmConfig::default();
    let get = |k: &str| pairs.get(k).map(String::as_str);
    let num = |k: &str, default: usize| -> Result<usize> {
        get(k).map_or(Ok(default), |v| {
            v.parse().with_context(|| format!("{k}: '{v}' is not an integer"))
        })
    };
    let real = |k: &str, default: f64| -> Result<f64> {
        get(k).map_or(Ok(default), |v| parse_ratio(v).with_context(|| k.to_string()))
    };

    let scales = match get("scale_set") {
        Some(v) => parse_list(v, ',').context("scale_set")?,
        None => d.scale_set.scales().to_vec(),
    };
    let eta = real("eta", d.scale_set.eta())?;
    let scale_set = ScaleSet::new(scales, eta).map_err(|e| anyhow!("invalid scale_set/eta: {e}"))?;
    let horizon = num("horizon", d.horizon)?;
    let input_sizes = match get("input_size") {
        Some(v) => parse_list(v, ';').context("input_size")?,
        None => vec![d.input_len],
    };
    let input_len = match input_sizes.as_slice() {
        [one] => *one,
        [short, long] => {
            if horizon <= 192 {
                *short
            } else {
                *long
            }
        }
        _ => bail!("input_size: expected 'L' or 'L_short;L_long'"),
    };
    let backend = match get("backend").unwrap_or("linear") {
        "linear" => BackendKind::Linear,
        "transformer" | "dual_embed" => BackendKind::Transformer,
        other => bail!("backend: '{other}' is not one of linear, transformer"),
    };
    let loss_mode = match get("loss_mode") {
        None | Some("default") => None,
        Some("per_scale") => Some(LossMode::PerScale),
        Some("joint") => Some(LossMode::Joint),
        Some(other) => bail!("loss_mode: '{other}' is not one of per_scale, joint"),
    };
    let split = match get("split") {
        Some(v) => {
            let parts: Vec<f64> = v
                .split(':')
                .map(|p| p.trim().parse::<f64>().with_context(|| format!("split: '{p}'")))
                .collect::<Result<_>>()?;
            let [a, b, c] = parts.as_slice() else {
                bail!("split: expected 'train:val:test', e.g. 7:1:2");
            };
            let total = a + b + c;
            SplitSpec::new(a / total, b / total, c / total).map_err(|e| anyhow!("split: {e}"))?
        }
        None => d.split,
    };
    let patch_sizes = get("patch_size")
        .map(|v| parse_list(v, ','))
        .transpose()
        .context("patch_size")?;

    let ldm = LdmConfig {
        scale_set,
        input_len,
        horizon,
        backend,
        loss_mode,
        ridge_lambda: real("ridge_lambda", d.ridge_lambda)?,
        layers: num("layers", d.layers)?,
        d_model: num("d_model", d.d_model)?,
        d_ff: num("d_ff", d.d_ff)?,
        n_heads: num("n_heads", d.n_heads)?,
        dropout: real("dropout", d.dropout)?,
        lr: real("lr", d.lr)?,
        batch_size: num("batch_size", d.batch_size)?,
        patch_sizes,
        split,
        stride: num("stride", d.stride)?,
        eval_stride: num("eval_stride", d.eval_stride)?,
        seed: get("seed").map_or(Ok(d.seed), |v| v.parse().with_context(|| format!("seed: '{v}'")))?,
        patience: num("patience", d.patience)?,
        max_epochs: num("max_epochs", d.max_epochs)?,
    };
    ldm.validate().map_err(|e| anyhow!("invalid configuration: {e}"))?;
    Ok(ExperimentConfig {
        ldm,
        input_sizes,
        data: get("data").map(PathBuf::from),
        target: get("target").map(str::to_string),
        date_column: get("date_column").unwrap_or("date").to_string(),
        baseline: get("baseline").map(parse_bool).transpose()?.unwrap_or(false),
    })
}

/// File + process environment.
pub fn load(path: &Path) -> Result<(BTreeMap<String, String>, ExperimentConfig)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut pairs = parse_pairs(&text).with_context(|| format!("parsing {}", path.display()))?;
    apply_env(&mut pairs, std::env::vars());
    let cfg = resolve(&pairs).with_context(|| format!("in {}", path.display()))?;
    Ok((pairs, cfg))
}
