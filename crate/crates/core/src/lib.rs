//! Logsparse decomposable multiscaling for long-horizon forecasting.
//!
//! A history window is split by a moving-average filter bank into detail
//! components and a trend, each component is cut to a logsparse tail, one
//! predictor forecasts each component at its own rate, and the forecasts are
//! linearly interpolated to the full horizon and summed.

pub mod error;
pub mod logsparse;
pub mod multiscale;
pub mod pipeline;
pub mod predictors;
pub mod series;

pub use error::{LdmError, Result};
pub use logsparse::{truncate_length, truncate_tail, TruncationPlan};
pub use multiscale::{
    avgpool_downsample, decompose, dominant_period, linear_interpolate, moving_average, reconstruct_level,
    spectral_forecastability, Component, ComponentKind, Decomposition, Forecastability, ScaleSet,
};
pub use pipeline::{
    build_scale_plan, evaluate, evaluate_ldm, forecast, oracle_forecast, run_protocol, train, train_direct_linear,
    BackendKind, DirectLinearModel, EvalReport, Forecaster, LdmConfig, LdmModel, LossMode, ScalePlan,
};
pub use predictors::{PredictorModel, TrainState};
pub use series::{
    apply_normalizer, chronological_split, fit_normalizer, invert_normalizer, mae, make_windows, mse, NormStats,
    SplitSpec, TimeSeries, WindowPair,
};
