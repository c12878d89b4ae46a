use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ldm_cli::config::parse_ratio;
use ldm_cli::dataset::write_csv;
use ldm_cli::experiment::{
    load_config, load_dataset, load_model, save_model, RunOptions, MANIFEST_FILE, MODEL_FILE, REPORT_FILE,
};
use ldm_cli::report::{emit_report, peak_rss_kb, ReportFile, RunManifest, Timings, SCHEMA_VERSION};
use ldm_cli::synthetic::{generate, SyntheticSpec};
use ldm_cli::{export_decomposition, ingest_csv, run_with, DatasetSource};
use ldm_core::pipeline::{evaluate_ldm, forecast, train};
use ldm_core::{chronological_split, ScaleSet, TimeSeries};

/// Logsparse decomposable multiscaling experiments.
#[derive(Parser)]
#[command(name = "ldm", version, about)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "LDM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Input CSV (header row; a `date` column is dropped).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Keep only this column.
    #[arg(long)]
    univariate: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Export every component of a multiscale decomposition as CSV.
    Decompose {
        #[command(flatten)]
        data: DataArgs,
        /// Take scales and eta from a config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated scale factors.
        #[arg(long, default_value = "24,168")]
        scales: String,
        #[arg(long, default_value = "1/16")]
        eta: String,
        #[arg(long, default_value = "out/decomposition")]
        out: PathBuf,
    },
    /// Train on the training split and save the model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Forecast the horizon following the last input window of a file.
    Forecast {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Evaluate a saved model on the test split of a file.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Full run: split, normalize, train, evaluate, report.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write per-window test predictions.
        #[arg(long)]
        predictions: bool,
    },
    /// Write a seeded synthetic multi-period CSV.
    Synth {
        #[arg(long, default_value_t = 20_000)]
        len: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated periods.
        #[arg(long, default_value = "24,168")]
        periods: String,
        #[arg(long, default_value_t = 0.001)]
        slope: f64,
        #[arg(long, default_value = "synthetic.csv")]
        out: PathBuf,
    },
}

fn source(data: &DataArgs) -> Result<DatasetSource> {
    let Some(path) = &data.data else {
        bail!("--data is required");
    };
    let mut src = DatasetSource::new(path);
    src.target_column = data.univariate.clone();
    Ok(src)
}

fn manifest(command: &str, config_hash: String, data: &ldm_cli::Dataset, seed: u64, timings: Timings) -> RunManifest {
    RunManifest {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        config_hash,
        dataset: data.fingerprint.clone(),
        seed,
        threads: rayon::current_num_threads(),
        timings,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Decompose {
            data,
            config,
            scales,
            eta,
            out,
        } => {
            let ss = match config {
                Some(path) => load_config(&path, &RunOptions::default())?.ldm.scale_set,
                None => {
                    let scales = scales
                        .split(',')
                        .map(|s| s.trim().parse::<usize>().with_context(|| format!("scale '{s}'")))
                        .collect::<Result<Vec<_>>>()?;
                    ScaleSet::new(scales, parse_ratio(&eta)?)?
                }
            };
            let ds = ingest_csv(&source(&data)?)?;
            let sidecar = export_decomposition(&ds.series, &ds.columns, &ss, &out)?;
            log::info!(
                "wrote {} components per channel for {} channels to {}",
                ss.depth() + 1,
                sidecar.channels.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            seed,
        } => {
            let opts = RunOptions {
                data: data.data.clone(),
                out: out.clone(),
                seed,
                univariate: data.univariate.clone(),
                predictions: false,
            };
            let cfg = load_config(&config, &opts)?;
            let t0 = Instant::now();
            let ds = load_dataset(&cfg)?;
            let ingest_seconds = t0.elapsed().as_secs_f64();
            let l = &cfg.ldm;
            let (train_seg, val_seg, _) = chronological_split(&ds.series, &l.split, l.input_len + l.horizon)?;
            let t1 = Instant::now();
            let model = train(l, &train_seg, val_seg.as_ref())?;
            let train_seconds = t1.elapsed().as_secs_f64();
            save_model(&model, &out.join(MODEL_FILE))?;
            let timings = Timings {
                ingest_seconds,
                train_seconds,
                total_seconds: t0.elapsed().as_secs_f64(),
                peak_rss_kb: peak_rss_kb(),
                ..Timings::default()
            };
            emit_report(
                &manifest("train", cfg.hash(), &ds, l.seed, timings),
                &out.join(MANIFEST_FILE),
            )?;
            log::info!(
                "trained on {} windows; model at {}",
                model.training.windows,
                out.join(MODEL_FILE).display()
            );
        }
        Command::Forecast { model, data, out } => {
            let m = load_model(&model)?;
            let ds = ingest_csv(&source(&data)?)?;
            let l = m.config.input_len;
            if ds.series.len() < l {
                bail!("need at least {l} rows, file has {}", ds.series.len());
            }
            let x = ds.series.slice(ds.series.len() - l, ds.series.len())?;
            let y: TimeSeries = forecast(&m, &x)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("forecast.csv");
            write_csv(&path, &y, &ds.columns)?;
            log::info!("wrote {} x {} forecast to {}", y.len(), y.channels(), path.display());
        }
        Command::Evaluate { model, data, out } => {
            let m = load_model(&model)?;
            let ds = ingest_csv(&source(&data)?)?;
            let c = &m.config;
            let (_, _, test) = chronological_split(&ds.series, &c.split, c.input_len + c.horizon)?;
            let Some(test) = test else {
                bail!("split leaves no test segment");
            };
            let mut r = evaluate_ldm(&m, &test, c.eval_stride)?;
            r.timing.peak_rss_kb = peak_rss_kb();
            println!("mse {:.6} mae {:.6} over {} windows", r.mse, r.mae, r.windows);
            let file = ReportFile {
                schema_version: SCHEMA_VERSION,
                config: c.clone(),
                plan: m.plan.clone(),
                training: Some(m.training.clone()),
                ldm: r,
                baseline: None,
            };
            emit_report(&file, &out.join(REPORT_FILE))?;
        }
        Command::Bench {
            config,
            data,
            out,
            seed,
            predictions,
        } => {
            let opts = RunOptions {
                data: data.data,
                out,
                seed,
                univariate: data.univariate,
                predictions,
            };
            let cfg = load_config(&config, &opts)?;
            let t0 = Instant::now();
            let ds = load_dataset(&cfg)?;
            let outcome = run_with(&cfg, &ds, t0.elapsed().as_secs_f64(), &opts, "bench")?;
            let r = &outcome.report;
            println!(
                "ldm      mse {:.6} mae {:.6} over {} windows",
                r.ldm.mse, r.ldm.mae, r.ldm.windows
            );
            if let Some(b) = &r.baseline {
                println!("baseline mse {:.6} mae {:.6}", b.mse, b.mae);
            }
        }
        Command::Synth {
            len,
            channels,
            noise,
            seed,
            periods,
            slope,
            out,
        } => {
            let periods = periods
                .split(',')
                .map(|s| s.trim().parse::<f64>().with_context(|| format!("period '{s}'")))
                .collect::<Result<Vec<_>>>()?;
            let s = generate(&SyntheticSpec {
                len,
                channels,
                periods,
                slope,
                noise,
                seed,
            })?;
            let columns: Vec<String> = (0..channels).map(|c| format!("x{c}")).collect();
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_csv(&out, &s, &columns)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
