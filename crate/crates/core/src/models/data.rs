//! Standardisation and sliding-window batches shared by the neural models.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Objective, ParamStore, Tensor, Var};
use crate::covariates::{CovariateMatrix, COVARIATE_WIDTH};
use crate::error::{Error, Result};

/// z-score transform. A zero spread maps to a unit divisor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateScaler {
    pub columns: Vec<Scaler>,
}

impl CovariateScaler {
    pub fn fit(rows: &[[f64; COVARIATE_WIDTH]]) -> Self {
        let columns = (0..COVARIATE_WIDTH)
            .map(|j| Scaler::fit(&rows.iter().map(|r| r[j]).collect::<Vec<_>>()))
            .collect();
        Self { columns }
    }

    pub fn apply(&self, row: &[f64; COVARIATE_WIDTH]) -> [f64; COVARIATE_WIDTH] {
        let mut out = [0.0; COVARIATE_WIDTH];
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.columns[j].apply(row[j]);
        }
        out
    }
}

/// Standardised load (and optionally covariates) on one contiguous grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub load: Vec<f64>,
    pub covariates: Option<Vec<[f64; COVARIATE_WIDTH]>>,
}

impl Prepared {
    pub fn new(
        load: &[f64],
        scaler: &Scaler,
        covariates: Option<(&CovariateMatrix, &CovariateScaler)>,
    ) -> Self {
        Self {
            load: load.iter().map(|v| scaler.apply(*v)).collect(),
            covariates: covariates.map(|(m, s)| m.rows().iter().map(|r| s.apply(r)).collect()),
        }
    }
}

/// A mini-batch of windows. Target day `b` starts at series index
/// `starts[b]`; lookback is `[start - l, start)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub lookback: usize,
    pub horizon: usize,
    /// `[size, lookback]`
    pub load: Vec<f64>,
    /// `[size, lookback, width]`, empty when the model ignores covariates.
    pub past_covariates: Vec<f64>,
    /// `[size, horizon, width]`, empty when the model ignores covariates.
    pub future_covariates: Vec<f64>,
    /// `[size, horizon]`, empty at inference time.
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn gather(data: &Prepared, starts: &[usize], lookback: usize, horizon: usize, with_targets: bool) -> Result<Self> {
        let mut b = Batch {
            size: starts.len(),
            lookback,
            horizon,
            load: Vec::with_capacity(starts.len() * lookback),
            past_covariates: Vec::new(),
            future_covariates: Vec::new(),
            targets: Vec::new(),
        };
        for &t in starts {
            if t < lookback {
                return Err(Error::InsufficientData { required: lookback, actual: t });
            }
            b.load.extend_from_slice(&data.load[t - lookback..t]);
            if with_targets {
                let tgt = data.load.get(t..t + horizon).ok_or(Error::InsufficientData {
                    required: t + horizon,
                    actual: data.load.len(),
                })?;
                b.targets.extend_from_slice(tgt);
            }
            if let Some(cov) = &data.covariates {
                let rows = cov.get(t - lookback..t + horizon).ok_or(Error::InsufficientData {
                    required: t + horizon,
                    actual: cov.len(),
                })?;
                for r in &rows[..lookback] {
                    b.past_covariates.extend_from_slice(r);
                }
                for r in &rows[lookback..] {
                    b.future_covariates.extend_from_slice(r);
                }
            }
        }
        Ok(b)
    }

    pub fn has_covariates(&self) -> bool {
        !self.past_covariates.is_empty()
    }

    pub fn covariate_width(&self) -> usize {
        if self.size == 0 || self.past_covariates.is_empty() {
            0
        } else {
            self.past_covariates.len() / (self.size * self.lookback)
        }
    }

    pub fn target_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.size, self.horizon], self.targets.clone())
    }
}

/// Differentiable network over standardised windows.
pub trait Network {
    fn lookback(&self) -> usize;
    fn horizon(&self) -> usize;
    fn uses_covariates(&self) -> bool;

    /// `[batch, horizon]` standardised predictions, in training mode.
    fn forward_train(&self, graph: &mut Graph, batch: &Batch) -> Result<Var>;

    /// Row-major `[batch, horizon]` standardised predictions.
    fn predict(&self, params: &ParamStore, batch: &Batch) -> Result<Vec<f64>> {
        let mut g = Graph::new(params);
        let out = self.forward_train(&mut g, batch)?;
        Ok(g.value(out).data().to_vec())
    }
}

/// MSE on standardised targets over fixed training and validation windows.
pub struct WindowObjective<'a, N: Network> {
    pub net: &'a N,
    pub data: &'a Prepared,
    pub train_starts: Vec<usize>,
    pub validation_starts: Vec<usize>,
    /// Upper bound on windows per validation forward pass.
    pub eval_batch: usize,
}

impl<N: Network> Objective for WindowObjective<'_, N> {
    fn train_samples(&self) -> usize {
        self.train_starts.len()
    }

    fn batch_loss(&self, graph: &mut Graph, batch: &[usize]) -> Result<Var> {
        let starts: Vec<usize> = batch.iter().map(|&i| self.train_starts[i]).collect();
        let b = Batch::gather(self.data, &starts, self.net.lookback(), self.net.horizon(), true)?;
        let pred = self.net.forward_train(graph, &b)?;
        let target = graph.input(b.target_tensor()?)?;
        graph.mse(pred, target)
    }

    fn validation_loss(&self, params: &ParamStore) -> Result<f64> {
        if self.validation_starts.is_empty() {
            return Err(Error::InsufficientData { required: 1, actual: 0 });
        }
        let mut sse = 0.0;
        let mut count = 0usize;
        for chunk in self.validation_starts.chunks(self.eval_batch.max(1)) {
            let b = Batch::gather(self.data, chunk, self.net.lookback(), self.net.horizon(), true)?;
            let pred = self.net.predict(params, &b)?;
            sse += pred.iter().zip(&b.targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
            count += pred.len();
        }
        Ok(sse / count as f64)
    }
}

/// Target start indices `t` in `[from, to)` with `t ≡ phase (mod stride)`,
/// full lookback before and a full horizon inside `[t, to)`.
pub fn window_starts(from: usize, to: usize, lookback: usize, horizon: usize, stride: usize, phase: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let first = from.max(lookback);
    let mut t = first + (phase + stride - first % stride) % stride;
    let mut out = Vec::new();
    while t + horizon <= to {
        out.push(t);
        t += stride;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaler_round_trip_and_constant() {
        let s = Scaler::fit(&[1.0, 2.0, 3.0, 4.0]);
        assert!((s.invert(s.apply(2.5)) - 2.5).abs() < 1e-12);
        let c = Scaler::fit(&[7.0; 5]);
        assert_eq!(c.std, 1.0);
        assert_eq!(c.apply(7.0), 0.0);
    }

    #[test]
    fn window_starts_respect_bounds_and_phase() {
        let w = window_starts(0, 20, 5, 3, 4, 0);
        assert_eq!(w, vec![8, 12, 16]);
        let w = window_starts(10, 30, 5, 4, 96, 0);
        assert!(w.is_empty());
        let w = window_starts(3, 12, 2, 2, 1, 0);
        assert_eq!(w, (3..=10).collect::<Vec<_>>());
    }

    #[test]
    fn gather_slices_lookback_targets_and_covariates() {
        let data = Prepared {
            load: (0..10).map(|v| v as f64).collect(),
            covariates: Some((0..10).map(|v| [v as f64; COVARIATE_WIDTH]).collect()),
        };
        let b = Batch::gather(&data, &[4, 6], 3, 2, true).unwrap();
        assert_eq!(b.load, vec![1.0, 2.0, 3.0, 3.0, 4.0, 5.0]);
        assert_eq!(b.targets, vec![4.0, 5.0, 6.0, 7.0]);
        assert_eq!(b.covariate_width(), COVARIATE_WIDTH);
        assert_eq!(b.future_covariates[0], 4.0);
        assert_eq!(b.future_covariates[COVARIATE_WIDTH * 3], 7.0);
        assert!(Batch::gather(&data, &[2], 3, 2, true).is_err());
        assert!(Batch::gather(&data, &[9], 3, 2, true).is_err());
    }
}
