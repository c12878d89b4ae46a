//! End-to-end framework: decompose -> truncate -> per-level predict ->
//! interpolate -> sum, plus training and evaluation drivers.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LdmError, Result};
use crate::logsparse::{budget_scale, tail, truncate_length};
use crate::multiscale::{
    decompose_channel, linear_interpolate, linear_interpolate_adjoint, spectral_forecastability, ScaleSet,
};
use crate::predictors::{
    train_step, DualEmbedConfig, DualEmbedModel, LinearPredictor, PredictorModel, RidgeAccumulator, Sample, TrainState,
};
use crate::series::{
    apply_normalizer, fit_normalizer, invert_normalizer, window_anchors, NormStats, SplitSpec, TimeSeries,
};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Linear,
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    PerScale,
    Joint,
}

/// Full experiment configuration. Transformer hyperparameters follow the
/// column names of the published configuration table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdmConfig {
    pub scale_set: ScaleSet,
    pub input_len: usize,
    pub horizon: usize,
    pub backend: BackendKind,
    /// `None` picks the backend default: per-scale for linear, joint for the
    /// transformer.
    pub loss_mode: Option<LossMode>,
    pub ridge_lambda: f64,
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Per-level patch sizes; `None` derives them from the scale set.
    pub patch_sizes: Option<Vec<usize>>,
    pub split: SplitSpec,
    pub stride: usize,
    pub eval_stride: usize,
    pub seed: u64,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for LdmConfig {
    fn default() -> Self {
        Self {
            scale_set: ScaleSet::new(vec![24, 168], 1.0 / 16.0).expect("valid default scales"),
            input_len: 336,
            horizon: 96,
            backend: BackendKind::Linear,
            loss_mode: None,
            ridge_lambda: 1.0,
            layers: 2,
            d_model: 16,
            d_ff: 256,
            n_heads: 4,
            dropout: 0.8,
            lr: 1e-4,
            batch_size: 128,
            patch_sizes: None,
            split: SplitSpec::default(),
            stride: 1,
            eval_stride: 1,
            seed: 2024,
            patience: 5,
            max_epochs: 50,
        }
    }
}

impl LdmConfig {
    pub fn loss_mode(&self) -> LossMode {
        self.loss_mode.unwrap_or(match self.backend {
            BackendKind::Linear => LossMode::PerScale,
            BackendKind::Transformer => LossMode::Joint,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.horizon == 0 {
            return Err(LdmError::param("input_size/horizon", "must be >= 1"));
        }
        if self.input_len < self.scale_set.min_input_len() {
            return Err(LdmError::param(
                "input_size",
                format!(
                    "{} leaves fewer than 4 trend samples; need at least {}",
                    self.input_len,
                    self.scale_set.min_input_len()
                ),
            ));
        }
        if self.stride == 0 || self.eval_stride == 0 {
            return Err(LdmError::param("stride", "must be >= 1"));
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return Err(LdmError::param("ridge_lambda", "must be finite and >= 0"));
        }
        self.split.validate()?;
        if self.backend == BackendKind::Transformer || self.loss_mode() == LossMode::Joint {
            if !(self.lr > 0.0 && self.lr.is_finite()) {
                return Err(LdmError::param("lr", "must be positive"));
            }
            if self.batch_size == 0 || self.max_epochs == 0 {
                return Err(LdmError::param("batch_size/max_epochs", "must be >= 1"));
            }
        }
        if let Some(p) = &self.patch_sizes {
            if p.len() != self.scale_set.depth() + 1 || p.contains(&0) {
                return Err(LdmError::param(
                    "patch_sizes",
                    format!("need {} positive entries", self.scale_set.depth() + 1),
                ));
            }
        }
        let plan = build_scale_plan(self)?;
        if self.backend == BackendKind::Transformer {
            for lp in &plan.levels {
                self.dual_embed_config(lp).validate()?;
            }
        }
        Ok(())
    }

    fn dual_embed_config(&self, lp: &LevelPlan) -> DualEmbedConfig {
        DualEmbedConfig {
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_heads: self.n_heads,
            layers: self.layers,
            dropout: self.dropout,
            patch: lp.patch,
            input_len: lp.kept_len,
            horizon: lp.horizon,
        }
    }
}

/// Shapes for one component's predictor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelPlan {
    pub level: usize,
    pub rate: usize,
    pub budget_scale: usize,
    pub full_len: usize,
    pub kept_len: usize,
    pub horizon: usize,
    pub patch: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalePlan {
    pub levels: Vec<LevelPlan>,
}

impl ScalePlan {
    pub fn kept_lengths(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.kept_len).collect()
    }

    pub fn horizons(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.horizon).collect()
    }

    pub fn full_lengths(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.full_len).collect()
    }
}

/// Horizon of component `level`: `H` at full rate, otherwise
/// `max(1, ceil(2H / p_n))`.
pub fn level_horizon(ss: &ScaleSet, horizon: usize, level: usize) -> usize {
    if level == 0 {
        horizon
    } else {
        (2 * horizon).div_ceil(ss.scales()[level - 1]).max(1)
    }
}

pub fn build_scale_plan(cfg: &LdmConfig) -> Result<ScalePlan> {
    let ss = &cfg.scale_set;
    let n = ss.depth();
    let levels = (0..=n)
        .map(|level| {
            let rate = ss.rate(level);
            let full_len = ss.full_length(cfg.input_len, level);
            let scale = budget_scale(ss, level);
            let kept_len = truncate_length(scale, full_len, ss.eta())?;
            if kept_len < 2 {
                return Err(LdmError::param(
                    "eta",
                    format!("level {level} keeps only {kept_len} sample(s); need at least 2"),
                ));
            }
            let natural = if level < n {
                ss.scales()[level]
            } else {
                ss.scales()[n - 1]
            } / rate;
            let patch = cfg.patch_sizes.as_ref().map_or(natural, |p| p[level]).min(kept_len);
            Ok(LevelPlan {
                level,
                rate,
                budget_scale: scale,
                full_len,
                kept_len,
                horizon: level_horizon(ss, cfg.horizon, level),
                patch,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScalePlan { levels })
}

/// Truncated component inputs of one normalized channel window.
pub fn component_inputs(x: &[f64], ss: &ScaleSet, plan: &ScalePlan) -> Result<Vec<Vec<f64>>> {
    Ok(decompose_channel(x, ss)?
        .into_iter()
        .zip(&plan.levels)
        .map(|(c, l)| tail(&c, l.kept_len).to_vec())
        .collect())
}

/// Per-level supervision targets: decompose `x || y` and keep the last
/// `H_n` samples of every component.
pub fn component_targets(x: &[f64], y: &[f64], ss: &ScaleSet, plan: &ScalePlan) -> Result<Vec<Vec<f64>>> {
    let joined: Vec<f64> = x.iter().chain(y).copied().collect();
    decompose_channel(&joined, ss)?
        .into_iter()
        .zip(&plan.levels)
        .map(|(c, l)| {
            if c.len() < l.horizon {
                return Err(LdmError::InsufficientData {
                    required: l.horizon,
                    actual: c.len(),
                });
            }
            Ok(tail(&c, l.horizon).to_vec())
        })
        .collect()
}

/// Interpolates each level forecast to `horizon` samples and sums them.
pub fn aggregate(level_forecasts: &[Vec<f64>], horizon: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; horizon];
    for f in level_forecasts {
        for (o, v) in out.iter_mut().zip(linear_interpolate(f, horizon)?) {
            *o += v;
        }
    }
    Ok(out)
}

/// Aggregated forecast built from the true future components of `x || y`.
/// Isolates interpolation and boundary error from learning error.
pub fn oracle_forecast(x: &[f64], y: &[f64], ss: &ScaleSet, plan: &ScalePlan) -> Result<Vec<f64>> {
    aggregate(&component_targets(x, y, ss, plan)?, y.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub loss_mode: LossMode,
    pub windows: usize,
    pub epochs: usize,
    pub best_val_mse: Option<f64>,
}

/// A trained framework instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdmModel {
    pub format_version: u32,
    pub config: LdmConfig,
    pub plan: ScalePlan,
    pub norm: NormStats,
    pub predictors: Vec<PredictorModel>,
    pub training: TrainingSummary,
}

/// Anything that maps a normalized `L`-window of one channel to `H` values.
pub trait Forecaster: Sync {
    fn input_len(&self) -> usize;
    fn horizon(&self) -> usize;
    fn norm(&self) -> &NormStats;
    fn forecast_normalized(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl LdmModel {
    /// Restores derived predictor state after deserialization and checks the
    /// container version and shapes.
    pub fn rehydrate(mut self) -> Result<Self> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(LdmError::param(
                "format_version",
                format!("unsupported model format {}", self.format_version),
            ));
        }
        self.predictors = self
            .predictors
            .into_iter()
            .map(PredictorModel::rehydrate)
            .collect::<Result<_>>()?;
        if self.predictors.len() != self.plan.levels.len() {
            return Err(LdmError::shape(
                format!("{} predictors", self.plan.levels.len()),
                format!("{} predictors", self.predictors.len()),
            ));
        }
        for (p, l) in self.predictors.iter().zip(&self.plan.levels) {
            if p.input_len() != l.kept_len || p.horizon() != l.horizon {
                return Err(LdmError::shape(
                    format!("level {} predictor {}->{}", l.level, l.kept_len, l.horizon),
                    format!("{}->{}", p.input_len(), p.horizon()),
                ));
            }
        }
        Ok(self)
    }

    /// Per-level forecasts (at each level's own rate) for a normalized window.
    pub fn level_forecasts(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        component_inputs(x, &self.config.scale_set, &self.plan)?
            .iter()
            .zip(&self.predictors)
            .map(|(c, p)| p.predict(c))
            .collect()
    }
}

impl Forecaster for LdmModel {
    fn input_len(&self) -> usize {
        self.config.input_len
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn norm(&self) -> &NormStats {
        &self.norm
    }

    fn forecast_normalized(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.config.input_len {
            return Err(LdmError::shape(
                format!("{} inputs", self.config.input_len),
                format!("{} inputs", x.len()),
            ));
        }
        aggregate(&self.level_forecasts(x)?, self.config.horizon)
    }
}

/// Forecasts `H` steps for every channel of a raw `M x L` window.
pub fn forecast<F: Forecaster + ?Sized>(model: &F, x: &TimeSeries) -> Result<TimeSeries> {
    if x.len() != model.input_len() {
        return Err(LdmError::shape(
            format!("{} time points", model.input_len()),
            format!("{} time points", x.len()),
        ));
    }
    let z = apply_normalizer(x, model.norm())?;
    let out = z
        .values()
        .iter()
        .map(|ch| model.forecast_normalized(ch))
        .collect::<Result<Vec<_>>>()?;
    invert_normalizer(&TimeSeries::new(out, x.rate(), x.name())?, model.norm())
}

/// Single direct linear map from the full `L` window to `H`, used as the
/// undecomposed reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectLinearModel {
    pub norm: NormStats,
    pub predictor: LinearPredictor,
}

impl Forecaster for DirectLinearModel {
    fn input_len(&self) -> usize {
        self.predictor.input_len()
    }

    fn horizon(&self) -> usize {
        self.predictor.horizon()
    }

    fn norm(&self) -> &NormStats {
        &self.norm
    }

    fn forecast_normalized(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.predictor.predict(x)
    }
}

const FEATURE_CHUNK: usize = 512;

fn windows_for(series: &TimeSeries, input: usize, horizon: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    let anchors = window_anchors(series.len(), input, horizon, stride)?;
    Ok(anchors
        .into_iter()
        .flat_map(|t| (0..series.channels()).map(move |c| (t, c)))
        .collect())
}

fn require_windows(n: usize, series: &TimeSeries, cfg: &LdmConfig) -> Result<()> {
    if n == 0 {
        return Err(LdmError::InsufficientData {
            required: cfg.input_len + cfg.horizon,
            actual: series.len(),
        });
    }
    Ok(())
}

/// Fits the undecomposed direct linear reference on a raw training segment.
pub fn train_direct_linear(cfg: &LdmConfig, train: &TimeSeries) -> Result<DirectLinearModel> {
    let norm = fit_normalizer(train)?;
    let z = apply_normalizer(train, &norm)?;
    let (l, h) = (cfg.input_len, cfg.horizon);
    let items = windows_for(&z, l, h, cfg.stride)?;
    require_windows(items.len(), &z, cfg)?;
    let acc = if cfg.stride == 1 {
        let channels: Vec<&[f64]> = z.values().iter().map(Vec::as_slice).collect();
        RidgeAccumulator::from_sliding(&channels, l, h, z.len() - l - h + 1)?
    } else {
        let mut acc = RidgeAccumulator::new(l, h);
        for &(t, c) in &items {
            let ch = z.channel(c);
            acc.push(&ch[t..t + l], &ch[t + l..t + l + h])?;
        }
        acc
    };
    Ok(DirectLinearModel {
        norm,
        predictor: acc.solve(cfg.ridge_lambda)?,
    })
}

/// Per-level training samples for every window of a normalized series.
fn level_samples(z: &TimeSeries, cfg: &LdmConfig, plan: &ScalePlan, stride: usize) -> Result<Vec<Vec<Sample>>> {
    let (l, h) = (cfg.input_len, cfg.horizon);
    let items = windows_for(z, l, h, stride)?;
    let per_window = items
        .par_iter()
        .map(|&(t, c)| {
            let ch = z.channel(c);
            let x = &ch[t..t + l];
            let inputs = component_inputs(x, &cfg.scale_set, plan)?;
            let targets = component_targets(x, &ch[t + l..t + l + h], &cfg.scale_set, plan)?;
            Ok((inputs, targets))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out: Vec<Vec<Sample>> = vec![Vec::with_capacity(per_window.len()); plan.levels.len()];
    for (inputs, targets) in per_window {
        for ((dst, x), y) in out.iter_mut().zip(inputs).zip(targets) {
            dst.push((x, y));
        }
    }
    Ok(out)
}

fn fit_per_scale_linear(z: &TimeSeries, cfg: &LdmConfig, plan: &ScalePlan) -> Result<(Vec<PredictorModel>, usize)> {
    let (l, h) = (cfg.input_len, cfg.horizon);
    let items = windows_for(z, l, h, cfg.stride)?;
    require_windows(items.len(), z, cfg)?;
    let mut accs: Vec<RidgeAccumulator> = plan
        .levels
        .iter()
        .map(|lp| RidgeAccumulator::new(lp.kept_len, lp.horizon))
        .collect();
    for chunk in items.chunks(FEATURE_CHUNK) {
        let feats = chunk
            .par_iter()
            .map(|&(t, c)| {
                let ch = z.channel(c);
                let x = &ch[t..t + l];
                Ok((
                    component_inputs(x, &cfg.scale_set, plan)?,
                    component_targets(x, &ch[t + l..t + l + h], &cfg.scale_set, plan)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        for (inputs, targets) in feats {
            for ((acc, x), y) in accs.iter_mut().zip(&inputs).zip(&targets) {
                acc.push(x, y)?;
            }
        }
    }
    let predictors = accs
        .into_par_iter()
        .map(|acc| acc.solve(cfg.ridge_lambda).map(PredictorModel::Linear))
        .collect::<Result<Vec<_>>>()?;
    Ok((predictors, items.len()))
}

fn init_predictors(cfg: &LdmConfig, plan: &ScalePlan) -> Result<Vec<PredictorModel>> {
    plan.levels
        .iter()
        .map(|lp| {
            Ok(match cfg.backend {
                BackendKind::Linear => {
                    let mut m = LinearPredictor::zeros(lp.kept_len, lp.horizon);
                    m.ridge_lambda = cfg.ridge_lambda;
                    PredictorModel::Linear(m)
                }
                BackendKind::Transformer => PredictorModel::DualEmbed(DualEmbedModel::new(
                    cfg.dual_embed_config(lp),
                    cfg.seed.wrapping_add(lp.level as u64 * 7919),
                )?),
            })
        })
        .collect()
}

/// Mean-squared error of a batch of per-level samples under one predictor.
fn level_mse(model: &PredictorModel, samples: &[Sample]) -> Result<f64> {
    let errs = samples
        .par_iter()
        .map(|(x, y)| {
            let p = model.predict(x)?;
            Ok(p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / (samples.len() * model.horizon()).max(1) as f64)
}

/// Adam training of one predictor on its own samples with early stopping.
fn fit_per_scale_gradient(
    mut model: PredictorModel,
    train: &[Sample],
    val: Option<&[Sample]>,
    cfg: &LdmConfig,
    seed: u64,
) -> Result<(PredictorModel, usize, Option<f64>)> {
    let mut state = TrainState::new(model.num_params(), cfg.lr, cfg.batch_size, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, PredictorModel)> = None;
    let mut stale = 0;
    let mut epochs = 0;
    for _ in 0..cfg.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = idx.iter().map(|&i| train[i].clone()).collect();
            train_step(&mut model, &mut state, &batch)?;
        }
        if let Some(v) = val.filter(|v| !v.is_empty()) {
            let m = level_mse(&model, v)?;
            if best.as_ref().is_none_or(|(b, _)| m < *b) {
                best = Some((m, model.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(match best {
        Some((m, b)) => (b, epochs, Some(m)),
        None => (model, epochs, None),
    })
}

/// One joint sample: per-level inputs and the raw target window.
struct JointSample {
    inputs: Vec<Vec<f64>>,
    y: Vec<f64>,
}

fn joint_samples(z: &TimeSeries, cfg: &LdmConfig, plan: &ScalePlan, stride: usize) -> Result<Vec<JointSample>> {
    let (l, h) = (cfg.input_len, cfg.horizon);
    windows_for(z, l, h, stride)?
        .par_iter()
        .map(|&(t, c)| {
            let ch = z.channel(c);
            Ok(JointSample {
                inputs: component_inputs(&ch[t..t + l], &cfg.scale_set, plan)?,
                y: ch[t + l..t + l + h].to_vec(),
            })
        })
        .collect()
}

fn joint_mse(models: &[PredictorModel], samples: &[JointSample], horizon: usize) -> Result<f64> {
    let errs = samples
        .par_iter()
        .map(|s| {
            let preds = models
                .iter()
                .zip(&s.inputs)
                .map(|(m, x)| m.predict(x))
                .collect::<Result<Vec<_>>>()?;
            let yhat = aggregate(&preds, horizon)?;
            Ok(yhat.iter().zip(&s.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / (samples.len() * horizon).max(1) as f64)
}

/// Loss and per-predictor gradients of the aggregated forecast MSE.
fn joint_loss_and_grads(
    models: &[PredictorModel],
    batch: &[&JointSample],
    horizon: usize,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let scale = 1.0 / (batch.len() * horizon) as f64;
    let per_sample = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let seed = dropout_seed.map(|d| d ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let fwd = models
                .iter()
                .zip(&s.inputs)
                .enumerate()
                .map(|(n, (m, x))| m.forward_train(x, seed.map(|v| v.wrapping_add(n as u64))))
                .collect::<Result<Vec<_>>>()?;
            let preds: Vec<Vec<f64>> = fwd.iter().map(|(o, _)| o.clone()).collect();
            let yhat = aggregate(&preds, horizon)?;
            let mut loss = 0.0;
            let gy: Vec<f64> = yhat
                .iter()
                .zip(&s.y)
                .map(|(a, b)| {
                    loss += (a - b).powi(2);
                    2.0 * (a - b) * scale
                })
                .collect();
            let grads: Vec<Vec<f64>> = models
                .iter()
                .zip(&fwd)
                .map(|(m, (out, tape))| {
                    let g_out = linear_interpolate_adjoint(&gy, out.len());
                    let mut g = vec![0.0; m.num_params()];
                    m.backward(tape, &g_out, &mut g);
                    g
                })
                .collect();
            Ok((loss * scale, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut grads: Vec<Vec<f64>> = models.iter().map(|m| vec![0.0; m.num_params()]).collect();
    for (l, gs) in per_sample {
        total += l;
        for (acc, g) in grads.iter_mut().zip(gs) {
            acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    if !total.is_finite() {
        return Err(LdmError::Diverged(format!("joint loss is {total}")));
    }
    Ok((total, grads))
}

fn fit_joint(
    z_train: &TimeSeries,
    z_val: Option<&TimeSeries>,
    cfg: &LdmConfig,
    plan: &ScalePlan,
) -> Result<(Vec<PredictorModel>, usize, usize, Option<f64>)> {
    let train = joint_samples(z_train, cfg, plan, cfg.stride)?;
    require_windows(train.len(), z_train, cfg)?;
    let val = match z_val {
        Some(v) => joint_samples(v, cfg, plan, cfg.eval_stride)?,
        None => Vec::new(),
    };
    let mut models = init_predictors(cfg, plan)?;
    let mut states = models
        .iter()
        .enumerate()
        .map(|(n, m)| TrainState::new(m.num_params(), cfg.lr, cfg.batch_size, cfg.seed.wrapping_add(n as u64)))
        .collect::<Result<Vec<_>>>()?;
    let dropout = models.iter().any(|m| m.dropout() > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Vec<PredictorModel>)> = None;
    let mut stale = 0;
    let mut epochs = 0;
    let mut step: u64 = 0;
    for _ in 0..cfg.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&JointSample> = idx.iter().map(|&i| &train[i]).collect();
            let seed = dropout.then(|| cfg.seed.wrapping_add(step.wrapping_mul(0x2545_F491)));
            let (_, grads) = joint_loss_and_grads(&models, &batch, cfg.horizon, seed)?;
            for ((m, st), g) in models.iter_mut().zip(&mut states).zip(&grads) {
                st.apply(m.params_mut(), g)?;
            }
            step += 1;
        }
        if !val.is_empty() {
            let m = joint_mse(&models, &val, cfg.horizon)?;
            log::debug!("joint epoch {epochs}: validation mse {m:.6}");
            if best.as_ref().is_none_or(|(b, _)| m < *b) {
                best = Some((m, models.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(match best {
        Some((m, b)) => (b, train.len(), epochs, Some(m)),
        None => (models, train.len(), epochs, None),
    })
}

/// Trains the framework on raw (unnormalized) training and optional
/// validation segments. Normalization statistics come from `train` only.
pub fn train(cfg: &LdmConfig, train: &TimeSeries, val: Option<&TimeSeries>) -> Result<LdmModel> {
    cfg.validate()?;
    let plan = build_scale_plan(cfg)?;
    let norm = fit_normalizer(train)?;
    let z_train = apply_normalizer(train, &norm)?;
    let z_val = val.map(|v| apply_normalizer(v, &norm)).transpose()?;
    let mode = cfg.loss_mode();

    let (predictors, windows, epochs, best_val_mse) = match (mode, cfg.backend) {
        (LossMode::PerScale, BackendKind::Linear) => {
            let (p, n) = fit_per_scale_linear(&z_train, cfg, &plan)?;
            (p, n, 0, None)
        }
        (LossMode::PerScale, BackendKind::Transformer) => {
            let train_sets = level_samples(&z_train, cfg, &plan, cfg.stride)?;
            let n = train_sets[0].len();
            require_windows(n, &z_train, cfg)?;
            let val_sets = match &z_val {
                Some(v) => Some(level_samples(v, cfg, &plan, cfg.eval_stride)?),
                None => None,
            };
            let init = init_predictors(cfg, &plan)?;
            let fitted = init
                .into_iter()
                .enumerate()
                .map(|(lvl, m)| {
                    let val = val_sets.as_ref().map(|v| v[lvl].as_slice());
                    fit_per_scale_gradient(m, &train_sets[lvl], val, cfg, cfg.seed.wrapping_add(lvl as u64))
                })
                .collect::<Result<Vec<_>>>()?;
            let epochs = fitted.iter().map(|f| f.1).max().unwrap_or(0);
            let vals: Vec<f64> = fitted.iter().filter_map(|f| f.2).collect();
            let best = (!vals.is_empty()).then(|| vals.iter().sum::<f64>());
            (fitted.into_iter().map(|f| f.0).collect(), n, epochs, best)
        }
        (LossMode::Joint, _) => fit_joint(&z_train, z_val.as_ref(), cfg, &plan)?,
    };
    Ok(LdmModel {
        format_version: MODEL_FORMAT_VERSION,
        config: cfg.clone(),
        plan,
        norm,
        predictors,
        training: TrainingSummary {
            loss_mode: mode,
            windows,
            epochs,
            best_val_mse,
        },
    })
}

/// Per-component diagnostics collected during evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub level: usize,
    pub rate: usize,
    pub kept_len: usize,
    pub horizon: usize,
    /// Mean forecastability of this component over the evaluated channels.
    pub forecastability: Option<f64>,
    /// MSE between the interpolated component forecast and the interpolated
    /// true future component.
    pub mse: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub peak_rss_kb: u64,
}

/// Metrics are in normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub windows: usize,
    pub mse: f64,
    pub mae: f64,
    pub mse_by_step: Vec<f64>,
    pub mae_by_step: Vec<f64>,
    pub input_forecastability: Option<f64>,
    pub components: Vec<ComponentReport>,
    pub timing: Timing,
}

struct WindowErrors {
    sq: Vec<f64>,
    abs: Vec<f64>,
    comp_sq: Vec<f64>,
}

fn mean_forecastability(z: &TimeSeries) -> Option<f64> {
    let vals: Vec<f64> = z
        .values()
        .iter()
        .filter_map(|c| spectral_forecastability(c).ok().map(|f| f.value))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Dense-window evaluation of any forecaster on a raw segment. Component
/// diagnostics are filled when `model` is an [`LdmModel`].
pub fn evaluate<F: Forecaster>(model: &F, test: &TimeSeries, stride: usize) -> Result<EvalReport> {
    evaluate_inner(model, None, test, stride)
}

pub fn evaluate_ldm(model: &LdmModel, test: &TimeSeries, stride: usize) -> Result<EvalReport> {
    evaluate_inner(model, Some(model), test, stride)
}

fn evaluate_inner<F: Forecaster>(
    model: &F,
    ldm: Option<&LdmModel>,
    test: &TimeSeries,
    stride: usize,
) -> Result<EvalReport> {
    let start = Instant::now();
    let (l, h) = (model.input_len(), model.horizon());
    let z = apply_normalizer(test, model.norm())?;
    let items = windows_for(&z, l, h, stride)?;
    if items.is_empty() {
        return Err(LdmError::InsufficientData {
            required: l + h,
            actual: z.len(),
        });
    }
    let n_levels = ldm.map_or(0, |m| m.plan.levels.len());
    let per_window = items
        .par_iter()
        .map(|&(t, c)| {
            let ch = z.channel(c);
            let x = &ch[t..t + l];
            let y = &ch[t + l..t + l + h];
            let mut comp_sq = vec![0.0; n_levels];
            let yhat = match ldm {
                Some(m) => {
                    let preds = m.level_forecasts(x)?;
                    let truth = component_targets(x, y, &m.config.scale_set, &m.plan)?;
                    for ((acc, p), tr) in comp_sq.iter_mut().zip(&preds).zip(&truth) {
                        let a = linear_interpolate(p, h)?;
                        let b = linear_interpolate(tr, h)?;
                        *acc = a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum();
                    }
                    aggregate(&preds, h)?
                }
                None => model.forecast_normalized(x)?,
            };
            Ok(WindowErrors {
                sq: yhat.iter().zip(y).map(|(a, b)| (a - b).powi(2)).collect(),
                abs: yhat.iter().zip(y).map(|(a, b)| (a - b).abs()).collect(),
                comp_sq,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = per_window.len() as f64;
    let mut mse_by_step = vec![0.0; h];
    let mut mae_by_step = vec![0.0; h];
    let mut comp = vec![0.0; n_levels];
    for w in &per_window {
        for i in 0..h {
            mse_by_step[i] += w.sq[i];
            mae_by_step[i] += w.abs[i];
        }
        for (a, b) in comp.iter_mut().zip(&w.comp_sq) {
            *a += b;
        }
    }
    mse_by_step.iter_mut().for_each(|v| *v /= n);
    mae_by_step.iter_mut().for_each(|v| *v /= n);
    let mse = mse_by_step.iter().sum::<f64>() / h as f64;
    let mae = mae_by_step.iter().sum::<f64>() / h as f64;
    if !(mse.is_finite() && mae.is_finite()) {
        return Err(LdmError::Diverged("non-finite evaluation metrics".into()));
    }

    let components = match ldm {
        Some(m) => component_diagnostics(m, &z, &comp, n)?,
        None => Vec::new(),
    };
    Ok(EvalReport {
        windows: per_window.len(),
        mse,
        mae,
        mse_by_step,
        mae_by_step,
        input_forecastability: mean_forecastability(&z),
        components,
        timing: Timing {
            eval_seconds: start.elapsed().as_secs_f64(),
            ..Timing::default()
        },
    })
}

fn component_diagnostics(m: &LdmModel, z: &TimeSeries, comp_sq: &[f64], windows: f64) -> Result<Vec<ComponentReport>> {
    let ss = &m.config.scale_set;
    let per_channel: Vec<Vec<Vec<f64>>> = if z.len() >= ss.min_input_len() {
        z.values()
            .iter()
            .map(|c| decompose_channel(c, ss))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(m.plan
        .levels
        .iter()
        .map(|lp| {
            let vals: Vec<f64> = per_channel
                .iter()
                .filter_map(|comps| spectral_forecastability(&comps[lp.level]).ok().map(|f| f.value))
                .collect();
            ComponentReport {
                level: lp.level,
                rate: lp.rate,
                kept_len: lp.kept_len,
                horizon: lp.horizon,
                forecastability: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
                mse: comp_sq[lp.level] / (windows * m.config.horizon as f64),
            }
        })
        .collect())
}

/// Full protocol on one raw series: chronological split, train-set
/// normalization, training and dense test evaluation.
pub fn run_protocol(cfg: &LdmConfig, series: &TimeSeries) -> Result<(LdmModel, EvalReport)> {
    cfg.validate()?;
    let (train_seg, val_seg, test_seg) =
        crate::series::chronological_split(series, &cfg.split, cfg.input_len + cfg.horizon)?;
    let t0 = Instant::now();
    let model = train(cfg, &train_seg, val_seg.as_ref())?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let test_seg = test_seg.ok_or_else(|| LdmError::param("split", "test fraction must be positive"))?;
    let mut report = evaluate_ldm(&model, &test_seg, cfg.eval_stride)?;
    report.timing.train_seconds = train_seconds;
    Ok((model, report))
}
