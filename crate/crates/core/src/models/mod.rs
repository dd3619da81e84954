//! Forecaster families, their flavors, training and checkpoints.

pub mod data;
mod lstm;
mod nbeats;
mod tcn;

pub use lstm::{LstmEdConfig, LstmEdNet};
pub use nbeats::{NBeatsConfig, NBeatsNet, NBeatsTrace};
pub use tcn::{tcn_num_layers, tcn_receptive_field, TcnConfig, TcnNet};

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use chrono::{NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{fit, Graph, ParamId, ParamRecord, ParamStore, TrainConfig, TrainingStats, Var};
use crate::covariates::{build_matrix, CovariateMatrix, HolidaySet};
use crate::error::{Error, Result};
use crate::psf::{fit_psf, PsfConfig, PsfModel};
use crate::series::{LoadSeries, STEPS_PER_DAY};
use data::{window_starts, Batch, CovariateScaler, Network, Prepared, Scaler, WindowObjective};

/// Day-ahead horizon in 15-minute steps.
pub const HORIZON: usize = 96;

pub(crate) fn default_horizon() -> usize {
    HORIZON
}

pub(crate) fn check_flavor(flavor: u8) -> Result<()> {
    if flavor > 1 {
        return Err(Error::UnknownModel(format!("flavor {flavor}")));
    }
    Ok(())
}

/// Dense layer `x w + b` with PyTorch-style uniform initialisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.affine(x, w, b)
    }
}

pub(crate) fn linear(params: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Ok(Linear {
        w: params.add_uniform(format!("{name}.w"), &[fan_in, fan_out], bound, rng)?,
        b: params.add_uniform(format!("{name}.b"), &[fan_out], bound, rng)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "psf")]
    Psf,
    #[serde(rename = "nbeats")]
    NBeats,
    #[serde(rename = "lstm")]
    LstmEd,
    #[serde(rename = "tcn")]
    Tcn,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Psf, Family::NBeats, Family::LstmEd, Family::Tcn];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Psf => "psf",
            Family::NBeats => "nbeats",
            Family::LstmEd => "lstm",
            Family::Tcn => "tcn",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "psf" => Ok(Family::Psf),
            "nbeats" => Ok(Family::NBeats),
            "lstm" | "lstmed" => Ok(Family::LstmEd),
            "tcn" => Ok(Family::Tcn),
            _ => Err(Error::UnknownModel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum ForecasterConfig {
    #[serde(rename = "psf")]
    Psf(PsfConfig),
    #[serde(rename = "nbeats")]
    NBeats(NBeatsConfig),
    #[serde(rename = "lstm")]
    LstmEd(LstmEdConfig),
    #[serde(rename = "tcn")]
    Tcn(TcnConfig),
}

impl ForecasterConfig {
    /// Flavor hyperparameters of `family`. `lookback` is ignored for PSF.
    pub fn flavor(family: Family, flavor: u8, lookback: usize) -> Result<Self> {
        Ok(match family {
            Family::Psf => ForecasterConfig::Psf(PsfConfig::flavor(flavor)?),
            Family::NBeats => ForecasterConfig::NBeats(NBeatsConfig::flavor(flavor, lookback)?),
            Family::LstmEd => ForecasterConfig::LstmEd(LstmEdConfig::flavor(flavor, lookback)?),
            Family::Tcn => ForecasterConfig::Tcn(TcnConfig::flavor(flavor, lookback)?),
        })
    }

    pub fn family(&self) -> Family {
        match self {
            ForecasterConfig::Psf(_) => Family::Psf,
            ForecasterConfig::NBeats(_) => Family::NBeats,
            ForecasterConfig::LstmEd(_) => Family::LstmEd,
            ForecasterConfig::Tcn(_) => Family::Tcn,
        }
    }

    /// Lookback in steps; `None` for PSF, which uses the whole history.
    pub fn lookback(&self) -> Option<usize> {
        match self {
            ForecasterConfig::Psf(_) => None,
            ForecasterConfig::NBeats(c) => Some(c.lookback),
            ForecasterConfig::LstmEd(c) => Some(c.lookback),
            ForecasterConfig::Tcn(c) => Some(c.lookback),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ForecasterConfig::Psf(c) => c.validate(),
            ForecasterConfig::NBeats(c) => c.validate(),
            ForecasterConfig::LstmEd(c) => c.validate(),
            ForecasterConfig::Tcn(c) => c.validate(),
        }
    }
}

/// Network of one of the neural families.
#[derive(Debug, Clone, PartialEq)]
pub enum Net {
    NBeats(NBeatsNet),
    LstmEd(LstmEdNet),
    Tcn(TcnNet),
}

impl Net {
    fn init(config: &ForecasterConfig, params: &mut ParamStore, seed: u64) -> Result<Option<Self>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Some(match config {
            ForecasterConfig::Psf(_) => return Ok(None),
            ForecasterConfig::NBeats(c) => Net::NBeats(NBeatsNet::init(c.clone(), params, &mut rng)?),
            ForecasterConfig::LstmEd(c) => Net::LstmEd(LstmEdNet::init(c.clone(), params, &mut rng)?),
            ForecasterConfig::Tcn(c) => Net::Tcn(TcnNet::init(c.clone(), params, &mut rng)?),
        }))
    }

    fn inner(&self) -> &dyn Network {
        match self {
            Net::NBeats(n) => n,
            Net::LstmEd(n) => n,
            Net::Tcn(n) => n,
        }
    }
}

impl Network for Net {
    fn lookback(&self) -> usize {
        self.inner().lookback()
    }

    fn horizon(&self) -> usize {
        self.inner().horizon()
    }

    fn uses_covariates(&self) -> bool {
        self.inner().uses_covariates()
    }

    fn forward_train(&self, graph: &mut Graph, batch: &Batch) -> Result<Var> {
        self.inner().forward_train(graph, batch)
    }

    fn predict(&self, params: &ParamStore, batch: &Batch) -> Result<Vec<f64>> {
        self.inner().predict(params, batch)
    }
}

/// Trained weights plus the standardisation fitted on the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralModel {
    pub net: Net,
    pub params: ParamStore,
    pub load_scaler: Scaler,
    pub covariate_scaler: Option<CovariateScaler>,
}

#[derive(Debug, Clone, PartialEq)]
enum State {
    Neural(NeuralModel),
    Psf(Option<PsfModel>),
}

/// What a forecaster sees when asked for the next day.
#[derive(Debug, Clone, Copy)]
pub struct ForecastContext<'a> {
    /// Observed load from `start` up to the step before the target day.
    pub observed: &'a [f64],
    pub start: NaiveDateTime,
    /// Calendar rows from `start`, covering at least the target day.
    pub covariates: &'a CovariateMatrix,
}

impl ForecastContext<'_> {
    pub fn target_start(&self) -> NaiveDateTime {
        self.start + crate::series::step() * self.observed.len() as i32
    }
}

pub trait DayAheadForecaster {
    /// Minimum number of observed steps before the first target day.
    fn min_history(&self) -> usize;

    /// The next 96 values, in megawatts.
    fn forecast_day(&self, ctx: &ForecastContext<'_>) -> Result<Vec<f64>>;
}

/// Training inputs: contiguous train and validation segments.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub train: &'a LoadSeries,
    pub validation: &'a LoadSeries,
    pub holidays: &'a HolidaySet,
    /// Step between consecutive training windows (validation uses whole days).
    pub stride: usize,
}

/// A forecaster of any family.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster {
    config: ForecasterConfig,
    state: State,
}

/// Instantiates the flavor's hyperparameters with parameters drawn from `seed`.
pub fn build_forecaster(family: Family, flavor: u8, lookback: usize, seed: u64) -> Result<Forecaster> {
    Forecaster::new(ForecasterConfig::flavor(family, flavor, lookback)?, seed)
}

fn steps_to_midnight(ts: NaiveDateTime) -> usize {
    let step = (ts.hour() as usize * 60 + ts.minute() as usize) / 15;
    (STEPS_PER_DAY - step) % STEPS_PER_DAY
}

impl Forecaster {
    pub fn new(config: ForecasterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let state = match Net::init(&config, &mut params, seed)? {
            None => State::Psf(None),
            Some(net) => State::Neural(NeuralModel {
                net,
                params,
                load_scaler: Scaler { mean: 0.0, std: 1.0 },
                covariate_scaler: None,
            }),
        };
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &ForecasterConfig {
        &self.config
    }

    pub fn family(&self) -> Family {
        self.config.family()
    }

    pub fn neural(&self) -> Option<&NeuralModel> {
        match &self.state {
            State::Neural(m) => Some(m),
            State::Psf(_) => None,
        }
    }

    pub fn psf(&self) -> Option<&PsfModel> {
        match &self.state {
            State::Psf(m) => m.as_ref(),
            State::Neural(_) => None,
        }
    }

    /// Fits the model. Neural families use mini-batch Adam with early
    /// stopping; the LSTM learning rate comes from its own config.
    pub fn fit(&mut self, data: &TrainingData<'_>, cfg: &TrainConfig) -> Result<TrainingStats> {
        match (&mut self.state, &self.config) {
            (State::Psf(slot), ForecasterConfig::Psf(pc)) => {
                let started = Instant::now();
                *slot = Some(fit_psf(data.train, data.validation, pc)?);
                Ok(TrainingStats {
                    wall_seconds: started.elapsed().as_secs_f64(),
                    best_validation_loss: f64::NAN,
                    ..Default::default()
                })
            }
            (State::Neural(model), config) => {
                let mut cfg = cfg.clone();
                if let ForecasterConfig::LstmEd(c) = config {
                    cfg.learning_rate = c.learning_rate;
                }
                fit_neural(model, data, &cfg)
            }
            _ => unreachable!("state always matches config"),
        }
    }

    /// JSON checkpoint: config, scaler statistics and parameters.
    pub fn to_json(&self) -> Result<String> {
        let ck = match &self.state {
            State::Neural(m) => Checkpoint {
                config: self.config.clone(),
                load_scaler: Some(m.load_scaler),
                covariate_scaler: m.covariate_scaler.clone(),
                params: m.params.to_records(),
                psf: None,
            },
            State::Psf(p) => Checkpoint {
                config: self.config.clone(),
                load_scaler: None,
                covariate_scaler: None,
                params: Vec::new(),
                psf: p.clone(),
            },
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        let mut f = Forecaster::new(ck.config, 0)?;
        match &mut f.state {
            State::Neural(m) => {
                m.params.load_records(&ck.params)?;
                m.load_scaler = ck
                    .load_scaler
                    .ok_or_else(|| Error::Config("checkpoint lacks load scaler".into()))?;
                m.covariate_scaler = ck.covariate_scaler;
                if m.net.uses_covariates() && m.covariate_scaler.is_none() {
                    return Err(Error::Config("checkpoint lacks covariate scaler".into()));
                }
            }
            State::Psf(slot) => *slot = ck.psf,
        }
        Ok(f)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: ForecasterConfig,
    load_scaler: Option<Scaler>,
    covariate_scaler: Option<CovariateScaler>,
    params: Vec<ParamRecord>,
    psf: Option<PsfModel>,
}

fn fit_neural(model: &mut NeuralModel, data: &TrainingData<'_>, cfg: &TrainConfig) -> Result<TrainingStats> {
    let (l, h) = (model.net.lookback(), model.net.horizon());
    let mut joined = data.train.clone();
    joined.extend(data.validation)?;
    model.load_scaler = Scaler::fit(data.train.values());
    let covariates = model.net.uses_covariates().then(|| build_matrix(&joined, data.holidays));
    model.covariate_scaler = covariates
        .as_ref()
        .map(|m| CovariateScaler::fit(&m.rows()[..data.train.len()]));
    let prepared = Prepared::new(
        joined.values(),
        &model.load_scaler,
        covariates.as_ref().zip(model.covariate_scaler.as_ref()),
    );
    let phase = steps_to_midnight(joined.start());
    let stride = data.stride.max(1);
    let train_starts = window_starts(0, data.train.len(), l, h, stride, phase % stride);
    let validation_starts = window_starts(data.train.len(), joined.len(), l, h, STEPS_PER_DAY, phase);
    if train_starts.is_empty() {
        return Err(Error::InsufficientData {
            required: l + h,
            actual: data.train.len(),
        });
    }
    if validation_starts.is_empty() {
        return Err(Error::InsufficientData {
            required: h,
            actual: data.validation.len(),
        });
    }
    let objective = WindowObjective {
        net: &model.net,
        data: &prepared,
        train_starts,
        validation_starts,
        eval_batch: cfg.batch_size,
    };
    fit(&mut model.params, &objective, cfg)
}

impl DayAheadForecaster for Forecaster {
    fn min_history(&self) -> usize {
        self.config.lookback().unwrap_or(2 * STEPS_PER_DAY)
    }

    fn forecast_day(&self, ctx: &ForecastContext<'_>) -> Result<Vec<f64>> {
        match &self.state {
            State::Psf(None) => Err(Error::NotTrained),
            State::Psf(Some(p)) => p.forecast_next(ctx.start, ctx.observed),
            State::Neural(m) => {
                let (l, h, n) = (m.net.lookback(), m.net.horizon(), ctx.observed.len());
                if n < l {
                    return Err(Error::InsufficientData { required: l, actual: n });
                }
                let load: Vec<f64> = ctx.observed[n - l..].iter().map(|v| m.load_scaler.apply(*v)).collect();
                let covariates = if m.net.uses_covariates() {
                    let scaler = m.covariate_scaler.as_ref().ok_or(Error::NotTrained)?;
                    if ctx.covariates.start() != ctx.start {
                        return Err(Error::param("covariates", "must start with the observed history"));
                    }
                    let rows = ctx.covariates.rows().get(n - l..n + h).ok_or(Error::InsufficientData {
                        required: n + h,
                        actual: ctx.covariates.len(),
                    })?;
                    Some(rows.iter().map(|r| scaler.apply(r)).collect())
                } else {
                    None
                };
                let prepared = Prepared { load, covariates };
                let batch = Batch::gather(&prepared, &[l], l, h, false)?;
                let z = m.net.predict(&m.params, &batch)?;
                Ok(z.into_iter().map(|v| m.load_scaler.invert(v)).collect())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_parsing() {
        assert_eq!("N-BEATS".parse::<Family>().unwrap(), Family::NBeats);
        assert_eq!("lstm_ed".parse::<Family>().unwrap(), Family::LstmEd);
        assert_eq!("TCN".parse::<Family>().unwrap(), Family::Tcn);
        assert!("gru".parse::<Family>().is_err());
        assert!(build_forecaster(Family::Tcn, 2, 384, 0).is_err());
    }

    #[test]
    fn build_instantiates_every_flavor() {
        let f = build_forecaster(Family::NBeats, 0, 384, 0).unwrap();
        match f.config() {
            ForecasterConfig::NBeats(c) => assert_eq!((c.stacks, c.layer_width), (20, 64)),
            other => panic!("{other:?}"),
        }
        assert!(!f.neural().unwrap().net.uses_covariates());
        let f = build_forecaster(Family::Tcn, 1, 672, 0).unwrap();
        match f.config() {
            ForecasterConfig::Tcn(c) => {
                assert_eq!((c.kernel_size, c.num_filters, c.dilation_base, c.num_layers), (5, 5, 3, None));
            }
            other => panic!("{other:?}"),
        }
        assert!(f.neural().unwrap().net.uses_covariates());
        let f = build_forecaster(Family::Psf, 1, 0, 0).unwrap();
        assert!(f.psf().is_none());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ForecasterConfig::Tcn(TcnConfig {
            kernel_size: 2,
            num_filters: 2,
            dilation_base: 2,
            num_layers: None,
            lookback: 8,
            covariate_width: 10,
            horizon: 4,
        });
        let mut f = Forecaster::new(cfg, 9).unwrap();
        if let State::Neural(m) = &mut f.state {
            m.covariate_scaler = Some(CovariateScaler::fit(&[[1.0; 10], [2.0; 10]]));
        }
        let back = Forecaster::from_json(&f.to_json().unwrap()).unwrap();
        assert_eq!(back, f);
        assert!(Forecaster::from_json("{\"config\": 3}").is_err());
    }

    #[test]
    fn steps_to_midnight_examples() {
        let d = chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        assert_eq!(steps_to_midnight(crate::series::midnight(d)), 0);
        assert_eq!(steps_to_midnight(d.and_hms_opt(23, 45, 0).unwrap()), 1);
    }
}
