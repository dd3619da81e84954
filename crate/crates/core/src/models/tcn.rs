//! Temporal convolutional network: stacked causal dilated convolutions with
//! residual links and a dense head over the last `horizon` positions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::{Batch, Network};
use super::{check_flavor, default_horizon, linear, Linear, HORIZON};
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::covariates::COVARIATE_WIDTH;
use crate::error::{Error, Result};

/// Smallest layer count `n` whose receptive field covers `lookback` steps,
/// i.e. the ceiling of `log_b((l - 1)(b - 1) / (k - 1) + 1)`.
pub fn tcn_num_layers(lookback: usize, dilation_base: usize, kernel_size: usize) -> Result<usize> {
    if kernel_size < 2 {
        return Err(Error::param("kernel_size", "must be at least 2"));
    }
    if dilation_base < 2 {
        return Err(Error::param("dilation_base", "must be at least 2"));
    }
    if lookback <= kernel_size {
        return Err(Error::param("lookback", format!("{lookback} must exceed the kernel size {kernel_size}")));
    }
    // (k - 1)(b^n - 1) >= (l - 1)(b - 1), in exact integers
    let need = (lookback as u128 - 1) * (dilation_base as u128 - 1);
    let (k, b) = (kernel_size as u128 - 1, dilation_base as u128);
    let mut n = 1;
    let mut pow = b;
    while k * (pow - 1) < need {
        n += 1;
        pow *= b;
    }
    Ok(n)
}

/// `1 + (k - 1)(b^n - 1)/(b - 1)`, saturating at `usize::MAX`.
pub fn tcn_receptive_field(num_layers: usize, kernel_size: usize, dilation_base: usize) -> usize {
    let b = dilation_base as u128;
    let geometric: u128 = if b == 1 {
        num_layers as u128
    } else {
        match u32::try_from(num_layers).ok().and_then(|n| b.checked_pow(n)) {
            Some(p) => (p - 1) / (b - 1),
            None => return usize::MAX,
        }
    };
    geometric
        .checked_mul(kernel_size.saturating_sub(1) as u128)
        .and_then(|v| v.checked_add(1))
        .and_then(|v| usize::try_from(v).ok())
        .unwrap_or(usize::MAX)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcnConfig {
    pub kernel_size: usize,
    pub num_filters: usize,
    pub dilation_base: usize,
    /// `None` selects the smallest depth with full lookback coverage.
    pub num_layers: Option<usize>,
    pub lookback: usize,
    pub covariate_width: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

impl TcnConfig {
    pub fn flavor(flavor: u8, lookback: usize) -> Result<Self> {
        check_flavor(flavor)?;
        let v = if flavor == 0 { 3 } else { 5 };
        Ok(Self {
            kernel_size: v,
            num_filters: v,
            dilation_base: if flavor == 0 { 2 } else { 3 },
            num_layers: None,
            lookback,
            covariate_width: COVARIATE_WIDTH,
            horizon: HORIZON,
        })
    }

    pub fn layers(&self) -> Result<usize> {
        match self.num_layers {
            Some(0) => Err(Error::param("num_layers", "must be positive")),
            Some(n) => Ok(n),
            None => tcn_num_layers(self.lookback, self.dilation_base, self.kernel_size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size < 2 || self.dilation_base < 2 {
            return Err(Error::param("tcn", "kernel_size and dilation_base must be at least 2"));
        }
        if self.num_filters == 0 {
            return Err(Error::param("num_filters", "must be positive"));
        }
        if self.horizon == 0 || self.horizon > self.lookback {
            return Err(Error::param("horizon", "must lie in 1..=lookback"));
        }
        self.layers().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    conv: Conv,
    dilation: usize,
    projection: Option<Conv>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcnNet {
    config: TcnConfig,
    layers: Vec<Layer>,
    head: Linear,
}

fn conv(params: &mut ParamStore, rng: &mut impl Rng, name: &str, c_out: usize, c_in: usize, k: usize) -> Result<Conv> {
    let bound = 1.0 / ((c_in * k) as f64).sqrt();
    Ok(Conv {
        w: params.add_uniform(format!("{name}.w"), &[c_out, c_in, k], bound, rng)?,
        b: params.add_uniform(format!("{name}.b"), &[c_out], bound, rng)?,
    })
}

impl TcnNet {
    pub fn init(config: TcnConfig, params: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let n = config.layers()?;
        let f = config.num_filters;
        let mut layers = Vec::with_capacity(n);
        let mut channels = 1 + config.covariate_width;
        let mut dilation = 1usize;
        for i in 0..n {
            let c = conv(params, rng, &format!("layer{i}.conv"), f, channels, config.kernel_size)?;
            let projection = if channels != f {
                Some(conv(params, rng, &format!("layer{i}.proj"), f, channels, 1)?)
            } else {
                None
            };
            layers.push(Layer {
                conv: c,
                dilation,
                projection,
            });
            channels = f;
            dilation = dilation.saturating_mul(config.dilation_base);
        }
        let head = linear(params, rng, "head", f * config.horizon, config.horizon)?;
        Ok(Self { config, layers, head })
    }

    pub fn config(&self) -> &TcnConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Channel-major input `[batch, 1 + covariates, lookback]`.
    pub fn input_tensor(&self, batch: &Batch) -> Result<Tensor> {
        let (bsz, l, cw) = (batch.size, batch.lookback, batch.covariate_width());
        if l != self.config.lookback || cw != self.config.covariate_width || batch.horizon != self.config.horizon {
            return Err(Error::shape(
                "tcn input",
                format!(
                    "batch (lookback {l}, horizon {}, covariates {cw}) does not match config (lookback {}, horizon {}, covariates {})",
                    batch.horizon, self.config.lookback, self.config.horizon, self.config.covariate_width
                ),
            ));
        }
        let c = 1 + cw;
        let mut data = vec![0.0; bsz * c * l];
        for b in 0..bsz {
            for t in 0..l {
                data[(b * c) * l + t] = batch.load[b * l + t];
                for j in 0..cw {
                    data[(b * c + 1 + j) * l + t] = batch.past_covariates[(b * l + t) * cw + j];
                }
            }
        }
        Tensor::new(vec![bsz, c, l], data)
    }

    /// Returns the head output and every layer's `[batch, filters, lookback]`
    /// activation.
    pub fn forward_traced(&self, g: &mut Graph, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut h = x;
        let mut acts = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (w, b) = (g.param(layer.conv.w), g.param(layer.conv.b));
            let z = g.causal_conv1d(h, w, b, layer.dilation)?;
            let a = g.relu(z)?;
            let skip = match layer.projection {
                Some(p) => {
                    let (w, b) = (g.param(p.w), g.param(p.b));
                    g.causal_conv1d(h, w, b, 1)?
                }
                None => h,
            };
            h = g.add(a, skip)?;
            acts.push(h);
        }
        let (bsz, f, l, hz) = (g.shape(h)[0], self.config.num_filters, self.config.lookback, self.config.horizon);
        let tail = g.narrow(h, 2, l - hz, hz)?;
        let flat = g.reshape(tail, &[bsz, f * hz])?;
        Ok((self.head.apply(g, flat)?, acts))
    }
}

impl Network for TcnNet {
    fn lookback(&self) -> usize {
        self.config.lookback
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn uses_covariates(&self) -> bool {
        self.config.covariate_width > 0
    }

    fn forward_train(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let x = g.input(self.input_tensor(batch)?)?;
        Ok(self.forward_traced(g, x)?.0)
    }
}
