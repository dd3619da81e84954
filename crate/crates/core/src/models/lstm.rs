//! Encoder-decoder LSTM. The encoder reads the lookback window, its final
//! state seeds the decoder, and the decoder emits one value per step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::{Batch, Network};
use super::{check_flavor, default_horizon, linear, Linear, HORIZON};
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::covariates::COVARIATE_WIDTH;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmEdConfig {
    pub recurrent_layers: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub lookback: usize,
    pub covariate_width: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Feed true previous values to the decoder during training.
    #[serde(default = "default_true")]
    pub teacher_forcing: bool,
}

fn default_true() -> bool {
    true
}

impl LstmEdConfig {
    pub fn flavor(flavor: u8, lookback: usize) -> Result<Self> {
        check_flavor(flavor)?;
        Ok(Self {
            recurrent_layers: if flavor == 0 { 1 } else { 2 },
            hidden_dim: if flavor == 0 { 20 } else { 64 },
            dropout: 0.0,
            learning_rate: if flavor == 0 { 0.0008 } else { 0.001 },
            lookback,
            covariate_width: COVARIATE_WIDTH,
            horizon: HORIZON,
            teacher_forcing: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.recurrent_layers == 0 || self.hidden_dim == 0 || self.lookback == 0 || self.horizon == 0 {
            return Err(Error::param("lstm", "layers, hidden_dim, lookback and horizon must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param("dropout", "must lie in [0, 1)"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmEdNet {
    config: LstmEdConfig,
    encoder: Vec<Cell>,
    decoder: Vec<Cell>,
    head: Linear,
}

fn cells(params: &mut ParamStore, rng: &mut impl Rng, prefix: &str, cfg: &LstmEdConfig) -> Result<Vec<Cell>> {
    let h = cfg.hidden_dim;
    let bound = 1.0 / (h as f64).sqrt();
    (0..cfg.recurrent_layers)
        .map(|i| {
            let input = if i == 0 { 1 + cfg.covariate_width } else { h };
            Ok(Cell {
                wx: params.add_uniform(format!("{prefix}{i}.wx"), &[input, 4 * h], bound, rng)?,
                wh: params.add_uniform(format!("{prefix}{i}.wh"), &[h, 4 * h], bound, rng)?,
                b: params.add_uniform(format!("{prefix}{i}.b"), &[4 * h], bound, rng)?,
            })
        })
        .collect()
}

impl LstmEdNet {
    pub fn init(config: LstmEdConfig, params: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let encoder = cells(params, rng, "encoder", &config)?;
        let decoder = cells(params, rng, "decoder", &config)?;
        let head = linear(params, rng, "head", config.hidden_dim, 1)?;
        Ok(Self {
            config,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &LstmEdConfig {
        &self.config
    }

    fn check(&self, batch: &Batch) -> Result<()> {
        let cw = batch.covariate_width();
        if batch.lookback != self.config.lookback || batch.horizon != self.config.horizon || cw != self.config.covariate_width {
            return Err(Error::shape(
                "lstm input",
                format!(
                    "batch (lookback {}, horizon {}, covariates {cw}) does not match config (lookback {}, horizon {}, covariates {})",
                    batch.lookback, batch.horizon, self.config.lookback, self.config.horizon, self.config.covariate_width
                ),
            ));
        }
        Ok(())
    }

    fn step(&self, g: &mut Graph, cells: &[Cell], input: Var, state: &mut [(Var, Var)]) -> Result<Var> {
        let mut x = input;
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                x = g.dropout(x, self.config.dropout)?;
            }
            let (wx, wh, b) = (g.param(cell.wx), g.param(cell.wh), g.param(cell.b));
            let (h, c) = g.lstm_step(x, state[i].0, state[i].1, wx, wh, b)?;
            state[i] = (h, c);
            x = h;
        }
        Ok(x)
    }

    /// Runs the encoder and returns the per-layer final `(h, c)`.
    fn encode(&self, g: &mut Graph, batch: &Batch) -> Result<Vec<(Var, Var)>> {
        let (bsz, l, cw) = (batch.size, batch.lookback, self.config.covariate_width);
        let zero = g.input(Tensor::zeros(&[bsz, self.config.hidden_dim]))?;
        let mut state = vec![(zero, zero); self.config.recurrent_layers];
        for t in 0..l {
            let mut row = Vec::with_capacity(bsz * (1 + cw));
            for b in 0..bsz {
                row.push(batch.load[b * l + t]);
                row.extend_from_slice(&batch.past_covariates[(b * l + t) * cw..(b * l + t + 1) * cw]);
            }
            let x = g.input(Tensor::new(vec![bsz, 1 + cw], row)?)?;
            self.step(g, &self.encoder, x, &mut state)?;
        }
        Ok(state)
    }

    fn covariate_input(&self, g: &mut Graph, batch: &Batch, j: usize) -> Result<Var> {
        let (bsz, h, cw) = (batch.size, batch.horizon, self.config.covariate_width);
        let mut rows = Vec::with_capacity(bsz * cw);
        for b in 0..bsz {
            rows.extend_from_slice(&batch.future_covariates[(b * h + j) * cw..(b * h + j + 1) * cw]);
        }
        g.input(Tensor::new(vec![bsz, cw], rows)?)
    }

    /// Runs the decoder for `horizon` steps. With `teacher` set, step `j`
    /// consumes the true value `j - 1`; otherwise it consumes its own
    /// previous output, keeping the graph connected through the feedback.
    fn decode(&self, g: &mut Graph, batch: &Batch, teacher: bool) -> Result<Var> {
        let bsz = batch.size;
        let mut state = self.encode(g, batch)?;
        let last: Vec<f64> = (0..bsz).map(|b| batch.load[(b + 1) * batch.lookback - 1]).collect();
        let mut prev = g.input(Tensor::new(vec![bsz, 1], last)?)?;
        let mut outputs = Vec::with_capacity(batch.horizon);
        for j in 0..batch.horizon {
            let x = if self.config.covariate_width > 0 {
                let cov = self.covariate_input(g, batch, j)?;
                g.concat(&[prev, cov])?
            } else {
                prev
            };
            let top = self.step(g, &self.decoder, x, &mut state)?;
            let y = self.head.apply(g, top)?;
            outputs.push(y);
            prev = if teacher {
                let t: Vec<f64> = (0..bsz).map(|b| batch.targets[b * batch.horizon + j]).collect();
                g.input(Tensor::new(vec![bsz, 1], t)?)?
            } else {
                y
            };
        }
        g.concat(&outputs)
    }

    /// Autoregressive decoding: each step consumes the previous prediction.
    pub fn forward_autoregressive(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        self.check(batch)?;
        self.decode(g, batch, false)
    }
}

impl Network for LstmEdNet {
    fn lookback(&self) -> usize {
        self.config.lookback
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn uses_covariates(&self) -> bool {
        self.config.covariate_width > 0
    }

    /// Teacher-forced unless the config asks for free-running training.
    fn forward_train(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        self.check(batch)?;
        if !self.config.teacher_forcing {
            return self.decode(g, batch, false);
        }
        if batch.targets.len() != batch.size * batch.horizon {
            return Err(Error::shape("lstm input", "teacher forcing needs targets"));
        }
        self.decode(g, batch, true)
    }

    fn predict(&self, params: &ParamStore, batch: &Batch) -> Result<Vec<f64>> {
        let mut g = Graph::new(params);
        let out = self.forward_autoregressive(&mut g, batch)?;
        Ok(g.value(out).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::data::Prepared;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(lookback: usize, horizon: usize) -> LstmEdConfig {
        LstmEdConfig {
            recurrent_layers: 2,
            hidden_dim: 3,
            dropout: 0.0,
            learning_rate: 1e-3,
            lookback,
            covariate_width: COVARIATE_WIDTH,
            horizon,
            teacher_forcing: true,
        }
    }

    fn batch(lookback: usize, horizon: usize) -> Batch {
        let n = lookback + horizon + 2;
        let data = Prepared {
            load: (0..n).map(|i| (i as f64 * 0.3).sin()).collect(),
            covariates: Some((0..n).map(|i| [(i as f64 * 0.1).cos(); COVARIATE_WIDTH]).collect()),
        };
        Batch::gather(&data, &[lookback, lookback + 2], lookback, horizon, true).unwrap()
    }

    #[test]
    fn flavors_match_reference_settings() {
        let f0 = LstmEdConfig::flavor(0, 384).unwrap();
        assert_eq!((f0.recurrent_layers, f0.hidden_dim, f0.learning_rate, f0.dropout), (1, 20, 0.0008, 0.0));
        let f1 = LstmEdConfig::flavor(1, 672).unwrap();
        assert_eq!((f1.recurrent_layers, f1.hidden_dim, f1.learning_rate), (2, 64, 0.001));
        assert_eq!(f1.covariate_width, 10);
    }

    #[test]
    fn zero_network_outputs_zero_for_any_lookback() {
        for l in [3, 7] {
            let mut p = ParamStore::new();
            let net = LstmEdNet::init(tiny(l, 96), &mut p, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            let ids: Vec<_> = p.ids().collect();
            for id in ids {
                p.get_mut(id).data_mut().fill(0.0);
            }
            let out = net.predict(&p, &batch(l, 96)).unwrap();
            assert_eq!(out.len(), 2 * 96);
            assert!(out.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn hidden_state_width_follows_config() {
        let mut p = ParamStore::new();
        LstmEdNet::init(LstmEdConfig::flavor(0, 8).unwrap(), &mut p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let wh = p.get(p.find("encoder0.wh").unwrap());
        assert_eq!(wh.shape(), &[20, 80]);
    }

    #[test]
    fn autoregressive_feeds_back_own_predictions() {
        let mut p = ParamStore::new();
        let net = LstmEdNet::init(tiny(4, 3), &mut p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = batch(4, 3);
        let free = net.predict(&p, &b).unwrap();
        // with targets replaced by the free-running output, teacher forcing reproduces it
        let mut forced = b.clone();
        forced.targets = free.clone();
        let mut g = Graph::new(&p);
        let y = net.forward_train(&mut g, &forced).unwrap();
        assert_eq!(g.value(y).data(), &free[..]);
    }

    #[test]
    fn covariate_mismatch_is_shape_error() {
        let mut p = ParamStore::new();
        let net = LstmEdNet::init(tiny(4, 3), &mut p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut b = batch(4, 3);
        b.past_covariates.clear();
        b.future_covariates.clear();
        assert!(matches!(net.predict(&p, &b), Err(Error::Shape { .. })));
    }
}
