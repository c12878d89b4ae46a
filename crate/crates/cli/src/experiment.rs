//! End-to-end runs: split, normalize, train, evaluate, write artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ldm_core::pipeline::{build_scale_plan, evaluate, evaluate_ldm, train, train_direct_linear, Forecaster, LdmModel};
use ldm_core::series::window_anchors;
use ldm_core::{apply_normalizer, chronological_split, TimeSeries};

use crate::config::{self, ExperimentConfig};
use crate::dataset::{ingest_csv, Dataset, DatasetSource};
use crate::report::{emit_report, peak_rss_kb, read_json, ReportFile, RunManifest, Timings, SCHEMA_VERSION};

pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `data` from the config file.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub univariate: Option<String>,
    pub predictions: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: ReportFile,
    pub manifest: RunManifest,
    pub model: LdmModel,
}

/// Loads the config file, applies environment and option overrides, and
/// validates everything before any data is read.
pub fn load_config(path: &Path, opts: &RunOptions) -> Result<ExperimentConfig> {
    let (mut pairs, _) = config::load(path)?;
    if let Some(seed) = opts.seed {
        pairs.insert("seed".into(), seed.to_string());
    }
    if let Some(col) = &opts.univariate {
        pairs.insert("target".into(), col.clone());
    }
    if let Some(data) = &opts.data {
        pairs.insert("data".into(), data.display().to_string());
    }
    config::resolve(&pairs).with_context(|| format!("in {}", path.display()))
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let Some(path) = &cfg.data else {
        bail!("no dataset: pass --data or set 'data' in the config");
    };
    let mut src = DatasetSource::new(path);
    src.target_column = cfg.target.clone();
    src.date_column = cfg.date_column.clone();
    ingest_csv(&src)
}

/// Writes normalized per-window forecasts of the test segment.
fn write_predictions<F: Forecaster>(
    model: &F,
    test: &TimeSeries,
    stride: usize,
    columns: &[String],
    path: &Path,
) -> Result<()> {
    let (l, h) = (model.input_len(), model.horizon());
    let z = apply_normalizer(test, model.norm())?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["window_start", "channel", "step", "y_true", "y_pred"])?;
    for t in window_anchors(z.len(), l, h, stride)? {
        for (c, name) in columns.iter().enumerate().take(z.channels()) {
            let ch = z.channel(c);
            let pred = model.forecast_normalized(&ch[t..t + l])?;
            for (k, p) in pred.iter().enumerate() {
                w.write_record([
                    t.to_string(),
                    name.clone(),
                    k.to_string(),
                    ch[t + l + k].to_string(),
                    p.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Split, train on the training segment (validation for early stopping),
/// evaluate on the test segment and write report, manifest and model.
pub fn run_with(
    cfg: &ExperimentConfig,
    data: &Dataset,
    ingest_seconds: f64,
    opts: &RunOptions,
    command: &str,
) -> Result<RunOutcome> {
    let start = Instant::now();
    let ldm_cfg = &cfg.ldm;
    let (train_seg, val_seg, test_seg) =
        chronological_split(&data.series, &ldm_cfg.split, ldm_cfg.input_len + ldm_cfg.horizon)?;
    let Some(test_seg) = test_seg else {
        bail!("split leaves no test segment");
    };

    let t0 = Instant::now();
    let model = train(ldm_cfg, &train_seg, val_seg.as_ref())?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let mut report = evaluate_ldm(&model, &test_seg, ldm_cfg.eval_stride)?;
    report.timing.train_seconds = train_seconds;
    report.timing.peak_rss_kb = peak_rss_kb();

    let baseline = if cfg.baseline {
        let t0 = Instant::now();
        let direct = train_direct_linear(ldm_cfg, &train_seg)?;
        let train_seconds = t0.elapsed().as_secs_f64();
        let mut r = evaluate(&direct, &test_seg, ldm_cfg.eval_stride)?;
        r.timing.train_seconds = train_seconds;
        r.timing.peak_rss_kb = peak_rss_kb();
        Some(r)
    } else {
        None
    };

    fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))?;
    if opts.predictions {
        write_predictions(
            &model,
            &test_seg,
            ldm_cfg.eval_stride,
            &data.columns,
            &opts.out.join(PREDICTIONS_FILE),
        )?;
    }
    let eval_seconds = report.timing.eval_seconds;
    let file = ReportFile {
        schema_version: SCHEMA_VERSION,
        config: ldm_cfg.clone(),
        plan: build_scale_plan(ldm_cfg)?,
        training: Some(model.training.clone()),
        ldm: report,
        baseline,
    };
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        config_hash: cfg.hash(),
        dataset: data.fingerprint.clone(),
        seed: ldm_cfg.seed,
        threads: rayon::current_num_threads(),
        timings: Timings {
            ingest_seconds,
            train_seconds,
            eval_seconds,
            total_seconds: ingest_seconds + start.elapsed().as_secs_f64(),
            peak_rss_kb: peak_rss_kb(),
        },
    };
    emit_report(&file, &opts.out.join(REPORT_FILE))?;
    emit_report(&manifest, &opts.out.join(MANIFEST_FILE))?;
    save_model(&model, &opts.out.join(MODEL_FILE))?;
    Ok(RunOutcome {
        report: file,
        manifest,
        model,
    })
}

/// Config path in, artifacts out. Configuration errors surface before the
/// dataset is touched.
pub fn run_experiment(config_path: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    let cfg = load_config(config_path, opts)?;
    let t0 = Instant::now();
    let data = load_dataset(&cfg)?;
    run_with(&cfg, &data, t0.elapsed().as_secs_f64(), opts, "bench")
}

/// The model container is the serde JSON form of [`LdmModel`], written with
/// full float precision.
pub fn save_model(model: &LdmModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string(model)?).with_context(|| format!("writing {}", path.display()))
}

pub fn load_model(path: &Path) -> Result<LdmModel> {
    let m: LdmModel = read_json(path)?;
    Ok(m.rehydrate()?)
}
