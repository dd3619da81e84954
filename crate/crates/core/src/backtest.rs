//! Day-ahead backtesting, MAPE and the per-run registry record.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::autodiff::TrainingStats;
use crate::covariates::CovariateMatrix;
use crate::error::{Error, Result};
use crate::models::{DayAheadForecaster, Family, ForecastContext, HORIZON};
use crate::series::{LoadSeries, STEPS_PER_DAY};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapeResult {
    /// Percent.
    pub value: f64,
    pub included: usize,
    /// Points with a zero actual value.
    pub excluded: usize,
}

/// Mean absolute percentage error over points with non-zero actuals.
pub fn mape(actual: &[f64], forecast: &[f64]) -> Result<MapeResult> {
    if actual.len() != forecast.len() || actual.is_empty() {
        return Err(Error::param(
            "mape",
            format!("need equal non-empty lengths, got {} and {}", actual.len(), forecast.len()),
        ));
    }
    let mut sum = 0.0;
    let mut included = 0;
    for (y, f) in actual.iter().zip(forecast) {
        if *y != 0.0 {
            sum += ((y - f) / y).abs();
            included += 1;
        }
    }
    if included == 0 {
        return Err(Error::AllPointsExcluded);
    }
    Ok(MapeResult {
        value: sum / included as f64 * 100.0,
        included,
        excluded: actual.len() - included,
    })
}

/// Meteorological seasons; December belongs to the winter it opens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Season {
    Winter,
    Spring,
    Summer,
    Autumn,
}

impl Season {
    pub const ALL: [Season; 4] = [Season::Winter, Season::Spring, Season::Summer, Season::Autumn];

    pub fn of(date: NaiveDate) -> Self {
        match date.month() {
            12 | 1 | 2 => Season::Winter,
            3..=5 => Season::Spring,
            6..=8 => Season::Summer,
            _ => Season::Autumn,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Season::Winter => "winter",
            Season::Spring => "spring",
            Season::Summer => "summer",
            Season::Autumn => "autumn",
        }
    }
}

impl fmt::Display for Season {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayForecast {
    pub date: NaiveDate,
    pub forecast: Vec<f64>,
    pub actual: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub model_id: String,
    pub days: Vec<DayForecast>,
    pub overall_mape: f64,
    pub per_season_mape: BTreeMap<Season, f64>,
    pub excluded_points: usize,
    pub training_stats: TrainingStats,
}

impl BacktestReport {
    /// Aggregates per-point MAPE over `days`.
    pub fn from_days(model_id: impl Into<String>, days: Vec<DayForecast>, training_stats: TrainingStats) -> Result<Self> {
        let (actual, forecast): (Vec<f64>, Vec<f64>) = days
            .iter()
            .flat_map(|d| d.actual.iter().copied().zip(d.forecast.iter().copied()))
            .unzip();
        let overall = mape(&actual, &forecast)?;
        let mut report = Self {
            model_id: model_id.into(),
            days,
            overall_mape: overall.value,
            per_season_mape: BTreeMap::new(),
            excluded_points: overall.excluded,
            training_stats,
        };
        report.per_season_mape = seasonal_breakdown(&report);
        Ok(report)
    }

    pub fn point_count(&self) -> usize {
        self.days.iter().map(|d| d.forecast.len()).sum()
    }
}

/// Per-season MAPE; seasons without any usable point are absent.
pub fn seasonal_breakdown(report: &BacktestReport) -> BTreeMap<Season, f64> {
    let mut buckets: BTreeMap<Season, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for d in &report.days {
        let b = buckets.entry(Season::of(d.date)).or_default();
        b.0.extend_from_slice(&d.actual);
        b.1.extend_from_slice(&d.forecast);
    }
    buckets
        .into_iter()
        .filter_map(|(s, (a, f))| mape(&a, &f).ok().map(|m| (s, m.value)))
        .collect()
}

/// Forecasts each day of `test` from everything observed before it, then
/// appends that day's actuals to the history. `covariates` must start with
/// `history` and cover the whole test span.
pub fn backtest_day_ahead(
    model: &dyn DayAheadForecaster,
    history: &LoadSeries,
    test: &LoadSeries,
    covariates: &CovariateMatrix,
) -> Result<BacktestReport> {
    if history.len() < model.min_history() {
        return Err(Error::InsufficientData {
            required: model.min_history(),
            actual: history.len(),
        });
    }
    if test.start() != history.end() {
        return Err(Error::param("test", "must start right after the history"));
    }
    let aligned = test.day_aligned();
    if aligned.len() != test.len() || test.is_empty() {
        return Err(Error::param("test", "must consist of whole days starting at midnight"));
    }
    if covariates.start() != history.start() || covariates.len() < history.len() + test.len() {
        return Err(Error::param("covariates", "must start with the history and cover the test span"));
    }
    let mut observed = history.values().to_vec();
    observed.reserve(test.len());
    let mut days = Vec::with_capacity(test.len() / STEPS_PER_DAY);
    for (i, actual) in test.values().chunks_exact(STEPS_PER_DAY).enumerate() {
        let ctx = ForecastContext {
            observed: &observed,
            start: history.start(),
            covariates,
        };
        let forecast = model.forecast_day(&ctx)?;
        if forecast.len() != HORIZON {
            return Err(Error::shape("forecast", format!("{} values instead of {HORIZON}", forecast.len())));
        }
        days.push(DayForecast {
            date: test.timestamp(i * STEPS_PER_DAY).date(),
            forecast,
            actual: actual.to_vec(),
        });
        observed.extend_from_slice(actual);
    }
    BacktestReport::from_days("", days, TrainingStats::default())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeasonalMape {
    pub winter: Option<f64>,
    pub spring: Option<f64>,
    pub summer: Option<f64>,
    pub autumn: Option<f64>,
}

impl From<&BTreeMap<Season, f64>> for SeasonalMape {
    fn from(m: &BTreeMap<Season, f64>) -> Self {
        Self {
            winter: m.get(&Season::Winter).copied(),
            spring: m.get(&Season::Spring).copied(),
            summer: m.get(&Season::Summer).copied(),
            autumn: m.get(&Season::Autumn).copied(),
        }
    }
}

/// One run-registry line. Failed runs carry `error` and null metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryRecord {
    pub model_id: usize,
    pub family: Family,
    pub flavor: u8,
    pub lookback: Option<usize>,
    pub overall_mape: Option<f64>,
    pub seasonal: SeasonalMape,
    pub epochs: Option<usize>,
    pub train_wall_seconds: f64,
    pub excluded_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RegistryRecord {
    pub fn from_report(model_id: usize, family: Family, flavor: u8, lookback: Option<usize>, report: &BacktestReport) -> Self {
        Self {
            model_id,
            family,
            flavor,
            lookback,
            overall_mape: Some(report.overall_mape),
            seasonal: SeasonalMape::from(&report.per_season_mape),
            epochs: (family != Family::Psf).then_some(report.training_stats.epochs_run),
            train_wall_seconds: report.training_stats.wall_seconds,
            excluded_points: report.excluded_points,
            error: None,
        }
    }

    pub fn failed(model_id: usize, family: Family, flavor: u8, lookback: Option<usize>, error: impl std::fmt::Display) -> Self {
        Self {
            model_id,
            family,
            flavor,
            lookback,
            overall_mape: None,
            seasonal: SeasonalMape::default(),
            epochs: None,
            train_wall_seconds: 0.0,
            excluded_points: 0,
            error: Some(error.to_string()),
        }
    }
}

/// Writes one JSON object per line.
pub fn write_registry<W: Write>(mut out: W, records: &[RegistryRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("registry", e))?;
    }
    Ok(())
}

pub fn append_registry(path: impl AsRef<Path>, records: &[RegistryRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    write_registry(std::io::BufWriter::new(file), records)
}

pub fn read_registry(path: impl AsRef<Path>) -> Result<Vec<RegistryRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
