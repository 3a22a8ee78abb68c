//! Adam training with shuffled mini-batches, validation-based early
//! stopping, and the 2x2 learning-rate/dropout grid.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{CnnModel, DnnModel, LogRegModel};
use crate::corpus::DecisionExample;
use crate::metrics::{self, MetricsError, MetricsReport, Prediction};
use crate::model::{self, ModelError, ModelParams};
use crate::numcore::{ParamSet, Scalar, Tensor};
use crate::rngs;

pub const LR_GRID: [f64; 2] = [3e-4, 9e-4];
pub const DROPOUT_GRID: [f64; 2] = [0.1, 0.3];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 30,
            patience: 3,
            seed: 13,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Config(format!("lr {} must be positive", self.lr)));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(TrainError::Config(format!("{name} {beta} outside [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(TrainError::Config("epsilon must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::Config("max_epochs must be positive".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-parameter Adam moments. Slot order mirrors the parameter set it was
/// built from.
#[derive(Clone, Debug)]
pub struct AdamState<F: Scalar> {
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.value().shape().to_vec())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.value().shape().to_vec())).collect();
        AdamState { m, v, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update from the accumulated gradients, which
    /// are zeroed afterwards so the next step starts clean.
    pub fn step(&mut self, params: &mut ParamSet<F>, config: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = F::from_f64(config.beta1);
        let b2 = F::from_f64(config.beta2);
        let one = F::one();
        // Corrections in f64: beta^t underflows f32 long before it matters.
        let mc = F::from_f64(1.0 - config.beta1.powi(t));
        let vc = F::from_f64(1.0 - config.beta2.powi(t));
        let lr = F::from_f64(config.lr);
        let eps = F::from_f64(config.epsilon);
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.update_values(|slot, value, grad| {
            let m = ms[slot].data_mut();
            let v = vs[slot].data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / mc;
                let v_hat = v[i] / vc;
                value[i] = value[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        params.zero_grads();
    }
}

/// Anything the loop can train: one gradient step per batch, probability
/// scoring, and access to the parameters for the optimizer.
pub trait Classifier {
    fn loss_step(
        &mut self,
        batch: &[DecisionExample],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<f64, ModelError>;
    fn predict_probs(&self, examples: &[DecisionExample]) -> Result<Vec<f64>, ModelError>;
    fn params(&self) -> &ParamSet<f32>;
    fn params_mut(&mut self) -> &mut ParamSet<f32>;
}

impl Classifier for ModelParams<f32> {
    fn loss_step(
        &mut self,
        batch: &[DecisionExample],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<f64, ModelError> {
        model::batch_loss(self, batch, dropout)
    }

    fn predict_probs(&self, examples: &[DecisionExample]) -> Result<Vec<f64>, ModelError> {
        model::predict_probs(self, examples)
    }

    fn params(&self) -> &ParamSet<f32> {
        &self.set
    }

    fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.set
    }
}

impl Classifier for LogRegModel<f32> {
    fn loss_step(
        &mut self,
        batch: &[DecisionExample],
        _dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<f64, ModelError> {
        LogRegModel::loss_step(self, batch)
    }

    fn predict_probs(&self, examples: &[DecisionExample]) -> Result<Vec<f64>, ModelError> {
        LogRegModel::predict_probs(self, examples)
    }

    fn params(&self) -> &ParamSet<f32> {
        &self.set
    }

    fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.set
    }
}

impl Classifier for DnnModel<f32> {
    fn loss_step(
        &mut self,
        batch: &[DecisionExample],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<f64, ModelError> {
        DnnModel::loss_step(self, batch, dropout)
    }

    fn predict_probs(&self, examples: &[DecisionExample]) -> Result<Vec<f64>, ModelError> {
        DnnModel::predict_probs(self, examples)
    }

    fn params(&self) -> &ParamSet<f32> {
        &self.set
    }

    fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.set
    }
}

impl Classifier for CnnModel<f32> {
    fn loss_step(
        &mut self,
        batch: &[DecisionExample],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<f64, ModelError> {
        CnnModel::loss_step(self, batch, dropout)
    }

    fn predict_probs(&self, examples: &[DecisionExample]) -> Result<Vec<f64>, ModelError> {
        CnnModel::predict_probs(self, examples)
    }

    fn params(&self) -> &ParamSet<f32> {
        &self.set
    }

    fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.set
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_f1: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Index into `history` of the epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_f1: f64,
}

/// Scores a model against gold labels with the shared metrics.
pub fn evaluate_model<M: Classifier>(
    model: &M,
    examples: &[DecisionExample],
) -> Result<MetricsReport, TrainError> {
    let probs = model.predict_probs(examples)?;
    let preds: Vec<Prediction> = probs
        .into_iter()
        .zip(examples)
        .map(|(p_change, ex)| Prediction { p_change, gold: ex.label })
        .collect();
    Ok(metrics::evaluate(&preds)?)
}

/// Trains until validation F1 stops improving for `patience` epochs, then
/// restores the parameters of the best epoch (ties keep the earliest). The
/// batch order and dropout masks derive from `config.seed`, so two runs with
/// the same inputs produce identical histories.
pub fn train<M: Classifier + Clone>(
    model: &mut M,
    train_set: &[DecisionExample],
    val_set: &[DecisionExample],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut batch_rng = rngs::stream_rng(config.seed, rngs::BATCH);
    let mut dropout_rng = rngs::stream_rng(config.seed, rngs::DROPOUT);
    let mut adam = AdamState::new(model.params());
    let mut history = Vec::new();
    let mut best: Option<(f64, M, usize)> = None;
    let mut stale = 0usize;
    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut batch_rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<DecisionExample> =
                chunk.iter().map(|&i| train_set[i].clone()).collect();
            total += model.loss_step(&batch, Some(&mut dropout_rng))?;
            batches += 1;
            adam.step(model.params_mut(), config);
        }
        let report = evaluate_model(model, val_set)?;
        history.push(EpochRecord {
            epoch,
            mean_loss: total / batches as f64,
            val_f1: report.f1,
            val_accuracy: report.accuracy,
        });
        let improved = best.as_ref().map_or(true, |(f1, _, _)| report.f1 > *f1);
        if improved {
            best = Some((report.f1, model.clone(), epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let (best_val_f1, best_model, best_epoch) = best.expect("at least one epoch ran");
    *model = best_model;
    Ok(TrainOutcome { history, best_epoch, best_val_f1 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub dropout: f64,
    pub outcome: TrainOutcome,
}

/// Trains one model per (lr, dropout) cell and keeps the one with the best
/// validation F1 (ties keep the earliest cell). The factory builds a fresh
/// model for the given dropout rate.
pub fn grid_search<M, F>(
    mut factory: F,
    train_set: &[DecisionExample],
    val_set: &[DecisionExample],
    base: &TrainConfig,
) -> Result<(M, GridPoint, Vec<GridPoint>), TrainError>
where
    M: Classifier + Clone,
    F: FnMut(f64) -> Result<M, ModelError>,
{
    let mut best: Option<(M, GridPoint)> = None;
    let mut points = Vec::with_capacity(LR_GRID.len() * DROPOUT_GRID.len());
    for &lr in &LR_GRID {
        for &dropout in &DROPOUT_GRID {
            let mut model = factory(dropout)?;
            let config = TrainConfig { lr, ..base.clone() };
            let outcome = train(&mut model, train_set, val_set, &config)?;
            let point = GridPoint { lr, dropout, outcome };
            let improved = best
                .as_ref()
                .map_or(true, |(_, b)| point.outcome.best_val_f1 > b.outcome.best_val_f1);
            if improved {
                best = Some((model, point.clone()));
            }
            points.push(point);
        }
    }
    let (model, point) = best.expect("grid is non-empty");
    Ok((model, point, points))
}
