//! Generic N-BEATS: fully connected blocks with doubly residual links.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::{Batch, Network};
use super::{check_flavor, default_horizon, linear, Linear, HORIZON};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBeatsConfig {
    pub stacks: usize,
    pub blocks_per_stack: usize,
    pub layers_per_block: usize,
    pub layer_width: usize,
    pub expansion_coefficient_dim: usize,
    pub lookback: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

impl NBeatsConfig {
    pub fn flavor(flavor: u8, lookback: usize) -> Result<Self> {
        check_flavor(flavor)?;
        Ok(Self {
            stacks: if flavor == 0 { 20 } else { 30 },
            blocks_per_stack: 1,
            layers_per_block: 4,
            layer_width: if flavor == 0 { 64 } else { 512 },
            expansion_coefficient_dim: 5,
            lookback,
            horizon: HORIZON,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("stacks", self.stacks),
            ("blocks_per_stack", self.blocks_per_stack),
            ("layers_per_block", self.layers_per_block),
            ("layer_width", self.layer_width),
            ("expansion_coefficient_dim", self.expansion_coefficient_dim),
            ("lookback", self.lookback),
            ("horizon", self.horizon),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::param(name, "must be positive"));
            }
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.stacks * self.blocks_per_stack
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    fc: Vec<Linear>,
    theta_b: Linear,
    theta_f: Linear,
    backcast: Linear,
    forecast: Linear,
}

/// Per-block outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct NBeatsTrace {
    pub forecast: Var,
    /// Input minus all backcasts.
    pub residual: Var,
    /// `(backcast, forecast)` per block, in order.
    pub blocks: Vec<(Var, Var)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NBeatsNet {
    config: NBeatsConfig,
    blocks: Vec<Block>,
}

impl NBeatsNet {
    /// Registers freshly initialised parameters in `params`.
    pub fn init(config: NBeatsConfig, params: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (l, h, w, e) = (config.lookback, config.horizon, config.layer_width, config.expansion_coefficient_dim);
        let mut blocks = Vec::with_capacity(config.num_blocks());
        for i in 0..config.num_blocks() {
            let p = format!("block{i}");
            let mut fc = Vec::with_capacity(config.layers_per_block);
            for j in 0..config.layers_per_block {
                let fan_in = if j == 0 { l } else { w };
                fc.push(linear(params, rng, &format!("{p}.fc{j}"), fan_in, w)?);
            }
            blocks.push(Block {
                fc,
                theta_b: linear(params, rng, &format!("{p}.theta_b"), w, e)?,
                theta_f: linear(params, rng, &format!("{p}.theta_f"), w, e)?,
                backcast: linear(params, rng, &format!("{p}.backcast"), e, l)?,
                forecast: linear(params, rng, &format!("{p}.forecast"), e, h)?,
            });
        }
        Ok(Self { config, blocks })
    }

    pub fn config(&self) -> &NBeatsConfig {
        &self.config
    }

    fn block(&self, g: &mut Graph, block: &Block, x: Var) -> Result<(Var, Var)> {
        let mut hidden = x;
        for fc in &block.fc {
            let z = fc.apply(g, hidden)?;
            hidden = g.relu(z)?;
        }
        let tb = block.theta_b.apply(g, hidden)?;
        let tf = block.theta_f.apply(g, hidden)?;
        Ok((block.backcast.apply(g, tb)?, block.forecast.apply(g, tf)?))
    }

    /// Forward pass over `x: [batch, lookback]` keeping every block output.
    pub fn forward_traced(&self, g: &mut Graph, x: Var) -> Result<NBeatsTrace> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.lookback {
            return Err(Error::shape(
                "nbeats input",
                format!("expected [batch, {}], got {shape:?}", self.config.lookback),
            ));
        }
        let mut residual = x;
        let mut forecast: Option<Var> = None;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (b, f) = self.block(g, block, residual)?;
            residual = g.sub(residual, b)?;
            forecast = Some(match forecast {
                None => f,
                Some(acc) => g.add(acc, f)?,
            });
            blocks.push((b, f));
        }
        Ok(NBeatsTrace {
            forecast: forecast.expect("at least one block"),
            residual,
            blocks,
        })
    }

    /// Evaluates block `index` alone on a single input window.
    pub fn block_output(&self, params: &ParamStore, index: usize, input: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let block = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::param("block", format!("index {index} out of range")))?;
        let mut g = Graph::new(params);
        let x = g.input(Tensor::new(vec![1, input.len()], input.to_vec())?)?;
        let (b, f) = self.block(&mut g, block, x)?;
        Ok((g.value(b).data().to_vec(), g.value(f).data().to_vec()))
    }

    /// Forecast for one standardised window.
    pub fn forward_window(&self, params: &ParamStore, window: &[f64]) -> Result<Vec<f64>> {
        if window.len() != self.config.lookback {
            return Err(Error::shape(
                "nbeats input",
                format!("window length {} != lookback {}", window.len(), self.config.lookback),
            ));
        }
        let mut g = Graph::new(params);
        let x = g.input(Tensor::new(vec![1, window.len()], window.to_vec())?)?;
        let t = self.forward_traced(&mut g, x)?;
        Ok(g.value(t.forecast).data().to_vec())
    }
}

impl Network for NBeatsNet {
    fn lookback(&self) -> usize {
        self.config.lookback
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn uses_covariates(&self) -> bool {
        false
    }

    fn forward_train(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let x = g.input(Tensor::new(vec![batch.size, batch.lookback], batch.load.clone())?)?;
        Ok(self.forward_traced(g, x)?.forecast)
    }
}
