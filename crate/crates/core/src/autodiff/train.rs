//! Mini-batch Adam training with early stopping on a validation loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, AdamState, Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 300,
            patience: 10,
            min_delta: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        if self.patience < 1 {
            return Err(Error::param("patience", "must be at least 1"));
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return Err(Error::param("batch_size", "batch_size and max_epochs must be at least 1"));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::param("min_delta", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingStats {
    pub epochs_run: usize,
    pub wall_seconds: f64,
    /// NaN when there is no validation loss (written as JSON null).
    #[serde(deserialize_with = "nullable_f64")]
    pub best_validation_loss: f64,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    /// Per-epoch `(train, validation)` losses.
    pub loss_curve: Vec<(f64, f64)>,
}

fn nullable_f64<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// What [`fit`] minimises: a differentiable loss over indexed training
/// samples plus a scalar validation score.
pub trait Objective {
    fn train_samples(&self) -> usize;

    /// Builds the mean loss over `batch` (sample indices) on `graph`.
    fn batch_loss(&self, graph: &mut Graph, batch: &[usize]) -> Result<Var>;

    fn validation_loss(&self, params: &ParamStore) -> Result<f64>;
}

/// Trains `params` on `objective`. Stops after `patience` consecutive epochs
/// without a validation improvement larger than `min_delta`, or at
/// `max_epochs`, and leaves the best-validation parameters in place.
pub fn fit(params: &mut ParamStore, objective: &dyn Objective, cfg: &TrainConfig) -> Result<TrainingStats> {
    cfg.validate()?;
    let n = objective.train_samples();
    if n == 0 {
        return Err(Error::InsufficientData { required: 1, actual: 0 });
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = TrainingStats {
        best_validation_loss: f64::INFINITY,
        ..Default::default()
    };
    let mut best_params: Option<ParamStore> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        let mut diverged = false;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let dropout_seed = cfg.seed ^ ((epoch as u64) << 32) ^ b as u64;
            let (loss, grads) = {
                let mut graph = Graph::training(params, dropout_seed);
                let loss = match objective.batch_loss(&mut graph, batch) {
                    Ok(l) => l,
                    Err(Error::NonFiniteValue { .. }) => {
                        diverged = true;
                        break;
                    }
                    Err(e) => return Err(e),
                };
                let value = graph.value(loss).data()[0];
                (value, graph.backward(loss)?)
            };
            if !loss.is_finite() {
                diverged = true;
                break;
            }
            match adam_step(params, &grads, &mut adam, cfg.learning_rate) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient { .. }) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
            weighted += loss * batch.len() as f64;
        }
        let validation = if diverged {
            f64::NAN
        } else {
            match objective.validation_loss(params) {
                Ok(v) => v,
                Err(Error::NonFiniteValue { .. }) => f64::NAN,
                Err(e) => return Err(e),
            }
        };
        if diverged || !validation.is_finite() {
            let last_finite_epoch = (epoch > 1).then_some(epoch - 1);
            if let Some(best) = best_params {
                *params = best;
            }
            return Err(Error::Diverged { epoch, last_finite_epoch });
        }

        stats.epochs_run = epoch;
        stats.loss_curve.push((weighted / n as f64, validation));
        if validation < stats.best_validation_loss - cfg.min_delta {
            stats.best_validation_loss = validation;
            stats.best_epoch = epoch;
            best_params = Some(params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    if let Some(best) = best_params {
        *params = best;
    }
    stats.wall_seconds = started.elapsed().as_secs_f64();
    Ok(stats)
}
