//! Experiment harness around `ldm_core`: CSV ingestion, flat config files,
//! end-to-end runs, decomposition exports and JSON reports.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod export;
pub mod report;
pub mod synthetic;

pub use config::ExperimentConfig;
pub use dataset::{ingest_csv, Dataset, DatasetFingerprint, DatasetSource};
pub use experiment::{run_experiment, run_with, RunOptions, RunOutcome};
pub use export::export_decomposition;
pub use report::{emit_report, ReportFile, RunManifest};
