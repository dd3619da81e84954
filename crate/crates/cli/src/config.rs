//! Experiment configuration, read from a sectioned `key = value` (TOML) file.
//!
//! ```toml
//! seed = 7
//! out = "runs/full"
//!
//! [data]
//! path = "data/load.csv"
//! holidays = "data/holidays.txt"
//!
//! [split]
//! train_years = [2009, 2017]
//! validation_year = 2018
//! test_year = 2019
//!
//! [grid]
//! families = ["psf", "nbeats", "lstm", "tcn"]
//! flavors = [0, 1]
//! lookbacks = [384, 672, 960]
//!
//! [training]
//! max_epochs = 100
//! patience = 10
//!
//! [model.nbeats.flavor1]
//! layer_width = 64
//!
//! [rerun]
//! models = [4, 12, 18]
//! split = { train_years = [2009, 2018], validation_year = 2019, test_year = 2020 }
//! ```
//!
//! Dates are quoted `YYYY-MM-DD` strings.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use gridcast::autodiff::TrainConfig;
use gridcast::drift::DriftConfig;
use gridcast::models::{Family, ForecasterConfig};
use gridcast::series::{midnight, SplitSpec, SyntheticSpec, DEFAULT_MAX_GAP};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

/// Lookback lengths of the reference grid: 4, 7 and 10 days.
pub const GRID_LOOKBACKS: [usize; 3] = [384, 672, 960];

/// Model IDs re-run on the shifted split by default.
pub const RERUN_MODELS: [usize; 3] = [4, 12, 18];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    /// Write zero training times to the registry so reruns are byte-identical.
    pub reproducible: bool,
    pub data: DataSection,
    pub split: Option<SplitSection>,
    pub grid: GridSection,
    pub training: TrainingSection,
    pub model: ModelOverrides,
    pub monitor: DriftConfig,
    pub rerun: Option<RerunSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub holidays: Option<PathBuf>,
    pub max_gap: usize,
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            holidays: None,
            max_gap: DEFAULT_MAX_GAP,
            synthetic: None,
        }
    }
}

/// Either calendar years or explicit boundary dates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_years: Option<[i32; 2]>,
    pub validation_year: Option<i32>,
    pub test_year: Option<i32>,
    pub train_start: Option<NaiveDate>,
    pub validation_start: Option<NaiveDate>,
    pub test_start: Option<NaiveDate>,
    pub test_end: Option<NaiveDate>,
}

impl SplitSection {
    pub fn resolve(&self) -> Result<SplitSpec> {
        let years = (self.train_years, self.validation_year, self.test_year);
        let dates = (self.train_start, self.validation_start, self.test_start, self.test_end);
        match (years, dates) {
            ((Some([a, b]), Some(v), Some(t)), (None, None, None, None)) => Ok(SplitSpec::from_years(a..=b, v, t)?),
            ((None, None, None), (Some(a), Some(b), Some(c), Some(d))) => Ok(SplitSpec {
                train_start: midnight(a),
                validation_start: midnight(b),
                test_start: midnight(c),
                test_end: midnight(d),
            }),
            _ => Err(CliError::Config(
                "split needs either train_years/validation_year/test_year or all four boundary dates".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub families: Vec<Family>,
    pub flavors: Vec<u8>,
    pub lookbacks: Vec<usize>,
    /// Restricts the run to these model IDs; IDs keep their grid position.
    pub models: Option<Vec<usize>>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            families: Family::ALL.to_vec(),
            flavors: vec![0, 1],
            lookbacks: GRID_LOOKBACKS.to_vec(),
            models: None,
        }
    }
}

/// One row of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub model_id: usize,
    pub family: Family,
    pub flavor: u8,
    /// `None` for PSF, which has no lookback.
    pub lookback: Option<usize>,
}

impl GridSection {
    /// Every cell in grid order: PSF flavors first, then each neural family
    /// by flavor and lookback. IDs count from 0 in that order.
    pub fn all_cells(&self) -> Vec<Cell> {
        let mut flavors = self.flavors.clone();
        dedup_in_order(&mut flavors);
        let mut lookbacks = self.lookbacks.clone();
        dedup_in_order(&mut lookbacks);
        let mut cells = Vec::new();
        for family in Family::ALL.into_iter().filter(|f| self.families.contains(f)) {
            for &flavor in &flavors {
                let lookbacks: Vec<Option<usize>> = match family {
                    Family::Psf => vec![None],
                    _ => lookbacks.iter().copied().map(Some).collect(),
                };
                for lookback in lookbacks {
                    cells.push(Cell {
                        model_id: cells.len(),
                        family,
                        flavor,
                        lookback,
                    });
                }
            }
        }
        cells
    }

    /// The cells to run, after the optional `models` filter.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let all = self.all_cells();
        let cells = match &self.models {
            None => all,
            Some(ids) => select(&all, ids)?,
        };
        if cells.is_empty() {
            return Err(CliError::Config("the grid has no cells".into()));
        }
        Ok(cells)
    }
}

/// Picks `ids` out of `cells`, keeping grid order.
pub fn select(cells: &[Cell], ids: &[usize]) -> Result<Vec<Cell>> {
    if let Some(id) = ids.iter().find(|id| !cells.iter().any(|c| c.model_id == **id)) {
        return Err(CliError::Config(format!("model {id} is not part of the grid")));
    }
    Ok(cells.iter().filter(|c| ids.contains(&c.model_id)).copied().collect())
}

fn dedup_in_order<T: PartialEq + Copy>(v: &mut Vec<T>) {
    let mut seen = Vec::with_capacity(v.len());
    v.retain(|x| {
        let fresh = !seen.contains(x);
        seen.push(*x);
        fresh
    });
}

/// Optimizer settings; unset keys keep the library defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub min_delta: Option<f64>,
    /// Steps between consecutive training windows.
    pub stride: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            learning_rate: None,
            batch_size: None,
            max_epochs: None,
            patience: None,
            min_delta: None,
            stride: 96,
        }
    }
}

impl TrainingSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            patience: self.patience.unwrap_or(d.patience),
            min_delta: self.min_delta.unwrap_or(d.min_delta),
            seed,
        }
    }
}

/// Per-family hyperparameter overrides. Top-level keys apply to every
/// flavor; a `flavor0` / `flavor1` sub-table applies to that flavor only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub psf: Option<toml::Table>,
    pub nbeats: Option<toml::Table>,
    pub lstm: Option<toml::Table>,
    pub tcn: Option<toml::Table>,
}

impl ModelOverrides {
    fn table(&self, family: Family) -> Option<&toml::Table> {
        match family {
            Family::Psf => self.psf.as_ref(),
            Family::NBeats => self.nbeats.as_ref(),
            Family::LstmEd => self.lstm.as_ref(),
            Family::Tcn => self.tcn.as_ref(),
        }
    }

    /// The flavor's configuration with overrides merged in.
    pub fn resolve(&self, family: Family, flavor: u8, lookback: Option<usize>) -> Result<ForecasterConfig> {
        let base = ForecasterConfig::flavor(family, flavor, lookback.unwrap_or(0))?;
        let Some(table) = self.table(family) else {
            return Ok(base);
        };
        let mut value = serde_json::to_value(&base)?;
        let mut common = table.clone();
        let specific: Vec<toml::Table> = ["flavor0", "flavor1"]
            .iter()
            .enumerate()
            .filter_map(|(i, key)| {
                let t = common.remove(*key)?;
                (i == usize::from(flavor)).then_some(t)
            })
            .map(|t| match t {
                toml::Value::Table(t) => Ok(t),
                _ => Err(CliError::Config(format!("model.{family}.flavor{flavor} must be a table"))),
            })
            .collect::<Result<_>>()?;
        for t in std::iter::once(&common).chain(&specific) {
            merge(&mut value, &serde_json::to_value(t)?, &format!("model.{family}"))?;
        }
        let config: ForecasterConfig = serde_json::from_value(value)
            .map_err(|e| CliError::Config(format!("model.{family}: {e}")))?;
        config.validate()?;
        Ok(config)
    }
}

/// Overwrites existing keys of `base` with `patch`, recursing into objects.
fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    let (Value::Object(b), Value::Object(p)) = (base, patch) else {
        return Err(CliError::Config(format!("{path} must be a table")));
    };
    for (key, v) in p {
        if matches!(key.as_str(), "family" | "lookback") {
            return Err(CliError::Config(format!("{path}.{key} is set by the grid")));
        }
        let slot = b
            .get_mut(key)
            .ok_or_else(|| CliError::Config(format!("unknown key {path}.{key}")))?;
        if slot.is_object() && v.is_object() {
            merge(slot, v, &format!("{path}.{key}"))?;
        } else {
            *slot = v.clone();
        }
    }
    Ok(())
}

/// Re-run of selected models on a later split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerunSection {
    #[serde(default = "rerun_models")]
    pub models: Vec<usize>,
    pub split: SplitSection,
}

fn rerun_models() -> Vec<usize> {
    RERUN_MODELS.to_vec()
}

impl ExperimentSpec {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|source| CliError::ConfigParse {
            path: origin.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        self.split
            .as_ref()
            .ok_or_else(|| CliError::Config("a [split] section is required".into()))?
            .resolve()
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        if self.data.path.is_some() == self.data.synthetic.is_some() {
            return Err(CliError::Config("set exactly one of data.path and data.synthetic".into()));
        }
        if self.jobs == Some(0) {
            return Err(CliError::Config("jobs must be at least 1".into()));
        }
        self.split_spec()?;
        let cells = self.grid.cells()?;
        for c in &cells {
            self.model.resolve(c.family, c.flavor, c.lookback)?;
        }
        self.training.train_config(0).validate()?;
        if self.training.stride == 0 {
            return Err(CliError::Config("training.stride must be at least 1".into()));
        }
        if let Some(r) = &self.rerun {
            r.split.resolve()?;
            select(&self.grid.all_cells(), &r.models)?;
        }
        Ok(())
    }
}
