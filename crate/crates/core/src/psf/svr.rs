//! Linear epsilon-insensitive regression used as a stacking meta-learner.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvrConfig {
    pub epsilon: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SvrConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            lambda: 1e-4,
            epochs: 100,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvrModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl SvrModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    /// Mean epsilon-insensitive loss plus `lambda / 2 * |w|^2`.
    pub fn objective(&self, features: &[Vec<f64>], targets: &[f64], cfg: &SvrConfig) -> f64 {
        let hinge: f64 = features
            .iter()
            .zip(targets)
            .map(|(x, y)| ((y - self.predict(x)).abs() - cfg.epsilon).max(0.0))
            .sum();
        hinge / targets.len() as f64 + 0.5 * cfg.lambda * self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Seeded stochastic sub-gradient descent from zero weights with a
/// `lr / sqrt(epoch)` schedule. Returns the iterate with the lowest
/// objective seen at epoch boundaries (the zero start included).
pub fn svr_meta_fit(features: &[Vec<f64>], targets: &[f64], cfg: &SvrConfig) -> Result<SvrModel> {
    if features.is_empty() || features.len() != targets.len() {
        return Err(Error::InsufficientData {
            required: features.len().max(1),
            actual: targets.len().min(features.len()),
        });
    }
    let m = features[0].len();
    if m == 0 || features.iter().any(|x| x.len() != m) {
        return Err(Error::param("features", "rows must share a positive width"));
    }
    if !(cfg.epsilon >= 0.0 && cfg.lambda >= 0.0 && cfg.learning_rate > 0.0) {
        return Err(Error::param("svr", "epsilon and lambda must be non-negative, learning_rate positive"));
    }
    let mut model = SvrModel {
        weights: vec![0.0; m],
        bias: 0.0,
    };
    let mut best = (model.objective(features, targets, cfg), model.clone());
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 1..=cfg.epochs {
        let lr = cfg.learning_rate / (epoch as f64).sqrt();
        order.shuffle(&mut rng);
        for &i in &order {
            let x = &features[i];
            let r = targets[i] - model.predict(x);
            let push = if r > cfg.epsilon {
                1.0
            } else if r < -cfg.epsilon {
                -1.0
            } else {
                0.0
            };
            for (w, v) in model.weights.iter_mut().zip(x) {
                *w += lr * (push * v - cfg.lambda * *w);
            }
            model.bias += lr * push;
        }
        let obj = model.objective(features, targets, cfg);
        if !obj.is_finite() {
            return Err(Error::Diverged {
                epoch,
                last_finite_epoch: (epoch > 1).then_some(epoch - 1),
            });
        }
        if obj < best.0 {
            best = (obj, model.clone());
        }
    }
    Ok(best.1)
}
