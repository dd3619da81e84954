//! Pattern sequence forecasting: days are clustered into labels and the day
//! after each earlier occurrence of the latest label sequence is averaged.

mod kmeans;
mod svr;

pub use kmeans::{
    distance_matrix, kmeans_fit, kmeans_rows, pick_best, select_clustering, silhouette_from_distances,
    silhouette_score, KMeansRun, Labeling, MAX_ITERATIONS,
};
pub use svr::{svr_meta_fit, SvrConfig, SvrModel};

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::data::Scaler;
use crate::series::{midnight, LoadSeries, STEPS_PER_DAY};

/// Window lengths of the ensemble members.
pub const PSF_WINDOWS: [usize; 5] = [1, 2, 3, 5, 7];

/// Standardised complete days, one 96-vector per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DayMatrix {
    rows: Vec<Vec<f64>>,
    dates: Vec<NaiveDate>,
    scaler: Scaler,
}

impl DayMatrix {
    /// Cuts `values` (starting at `start`) into midnight-aligned days,
    /// dropping partial leading and trailing days.
    pub fn from_values(start: NaiveDateTime, values: &[f64], scaler: Scaler) -> Result<Self> {
        let minutes = start.hour() as usize * 60 + start.minute() as usize;
        let offset = (STEPS_PER_DAY - minutes / 15 % STEPS_PER_DAY) % STEPS_PER_DAY;
        let first = if offset == 0 { start.date() } else { start.date().succ_opt().expect("date in range") };
        let usable = values.get(offset..).unwrap_or(&[]);
        let count = usable.len() / STEPS_PER_DAY;
        if count < 2 {
            return Err(Error::InsufficientData { required: 2, actual: count });
        }
        let rows = usable
            .chunks_exact(STEPS_PER_DAY)
            .map(|d| d.iter().map(|v| scaler.apply(*v)).collect())
            .collect();
        let dates = first.iter_days().take(count).collect();
        Ok(Self { rows, dates, scaler })
    }

    /// Test and tooling constructor from already standardised rows.
    pub fn from_rows(rows: Vec<Vec<f64>>, first: NaiveDate, scaler: Scaler) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InsufficientData { required: 1, actual: 0 });
        }
        let width = rows[0].len();
        if width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::param("rows", "rows must share a positive width"));
        }
        let dates = first.iter_days().take(rows.len()).collect();
        Ok(Self { rows, dates, scaler })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn scaler(&self) -> Scaler {
        self.scaler
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row `i` in megawatts.
    pub fn destandardized(&self, i: usize) -> Vec<f64> {
        self.rows[i].iter().map(|z| self.scaler.invert(*z)).collect()
    }
}

/// Days of `series` standardised by `scaler` (fit on the training set).
pub fn day_matrix(series: &LoadSeries, scaler: Scaler) -> Result<DayMatrix> {
    DayMatrix::from_values(series.start(), series.values(), scaler)
}

/// Forecast for the day after the last row of `days`, in megawatts.
///
/// Successor days of every earlier occurrence of the last `w` labels are
/// summed in chronological order and divided by the match count. Without a
/// match `w` shrinks by one; at zero the mean of all days is returned.
pub fn predict_with_labels(labels: &[usize], days: &DayMatrix, w: usize) -> Result<Vec<f64>> {
    let n = labels.len();
    if n != days.len() || n == 0 {
        return Err(Error::param("labels", format!("{n} labels for {} days", days.len())));
    }
    let mean_of = |idx: &[usize]| -> Vec<f64> {
        let mut acc = vec![0.0; days.rows[0].len()];
        for &i in idx {
            for (a, v) in acc.iter_mut().zip(days.destandardized(i)) {
                *a += v;
            }
        }
        acc.into_iter().map(|a| a / idx.len() as f64).collect()
    };
    let mut w = w.min(n - 1);
    while w > 0 {
        let tail = &labels[n - w..];
        let successors: Vec<usize> = (0..n - w).filter(|&i| &labels[i..i + w] == tail).map(|i| i + w).collect();
        if !successors.is_empty() {
            return Ok(mean_of(&successors));
        }
        w -= 1;
    }
    Ok(mean_of(&(0..n).collect::<Vec<_>>()))
}

pub fn psf_predict_day(labeling: &Labeling, days: &DayMatrix, w: usize) -> Result<Vec<f64>> {
    if w == 0 {
        return Err(Error::param("w", "window length must be at least 1"));
    }
    predict_with_labels(&labeling.labels, days, w)
}

/// Element-wise mean of equally long member forecasts.
pub fn ensemble_average(members: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = members.first().ok_or(Error::InsufficientData { required: 1, actual: 0 })?;
    if members.iter().any(|m| m.len() != first.len()) {
        return Err(Error::param("members", "member forecasts differ in length"));
    }
    let mut acc = vec![0.0; first.len()];
    for m in members {
        for (a, v) in acc.iter_mut().zip(m) {
            *a += v;
        }
    }
    Ok(acc.into_iter().map(|a| a / members.len() as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMethod {
    Averaging,
    Stacking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsfConfig {
    pub windows: Vec<usize>,
    pub k_min: usize,
    pub k_max: usize,
    pub seed: u64,
    pub restarts: usize,
    pub ensemble: EnsembleMethod,
    pub svr: SvrConfig,
}

impl Default for PsfConfig {
    fn default() -> Self {
        Self {
            windows: PSF_WINDOWS.to_vec(),
            k_min: 2,
            k_max: 10,
            seed: 0,
            restarts: 5,
            ensemble: EnsembleMethod::Averaging,
            svr: SvrConfig::default(),
        }
    }
}

impl PsfConfig {
    pub fn flavor(flavor: u8) -> Result<Self> {
        crate::models::check_flavor(flavor)?;
        Ok(Self {
            ensemble: if flavor == 0 { EnsembleMethod::Averaging } else { EnsembleMethod::Stacking },
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() || self.windows.contains(&0) {
            return Err(Error::param("windows", "need at least one window, each >= 1"));
        }
        if self.k_min < 2 || self.k_max < self.k_min {
            return Err(Error::param("k_range", "must satisfy 2 <= k_min <= k_max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum PsfCombiner {
    Averaging,
    Stacking(SvrModel),
}

/// Fitted PSF ensemble: centroids and labels of the training days, member
/// window lengths, scaler and combiner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsfModel {
    pub scaler: Scaler,
    pub labeling: Labeling,
    pub windows: Vec<usize>,
    pub combiner: PsfCombiner,
}

impl PsfModel {
    /// Standardised member forecasts for the day after `days`.
    fn members(&self, days: &DayMatrix) -> Result<Vec<Vec<f64>>> {
        let labels: Vec<usize> = days.rows().iter().map(|r| self.labeling.assign(r)).collect();
        self.windows
            .iter()
            .map(|&w| {
                Ok(predict_with_labels(&labels, days, w)?
                    .into_iter()
                    .map(|v| self.scaler.apply(v))
                    .collect())
            })
            .collect()
    }

    fn combine(&self, members: &[Vec<f64>]) -> Result<Vec<f64>> {
        let z = match &self.combiner {
            PsfCombiner::Averaging => ensemble_average(members)?,
            PsfCombiner::Stacking(svr) => (0..members[0].len())
                .map(|t| svr.predict(&members.iter().map(|m| m[t]).collect::<Vec<_>>()))
                .collect(),
        };
        Ok(z.into_iter().map(|v| self.scaler.invert(v)).collect())
    }

    /// Forecast (MW) for the day starting right after `observed`, which
    /// begins at `start` and must end at midnight.
    pub fn forecast_next(&self, start: NaiveDateTime, observed: &[f64]) -> Result<Vec<f64>> {
        let end_minutes = start.hour() as usize * 60 + start.minute() as usize + observed.len() * 15;
        if end_minutes % (24 * 60) != 0 {
            return Err(Error::param("observed", "history must end at midnight"));
        }
        let days = DayMatrix::from_values(start, observed, self.scaler)?;
        let members = self.members(&days)?;
        self.combine(&members)
    }
}

/// Clusters the training days, then (for stacking) fits the meta-learner on
/// member forecasts of every validation day.
pub fn fit_psf(train: &LoadSeries, validation: &LoadSeries, cfg: &PsfConfig) -> Result<PsfModel> {
    cfg.validate()?;
    let scaler = Scaler::fit(train.values());
    let days = day_matrix(train, scaler)?;
    let labeling = select_clustering(&days, cfg.k_min, cfg.k_max, cfg.seed, cfg.restarts)?;
    let mut model = PsfModel {
        scaler,
        labeling,
        windows: cfg.windows.clone(),
        combiner: PsfCombiner::Averaging,
    };
    if cfg.ensemble == EnsembleMethod::Stacking {
        let mut joined = train.clone();
        joined.extend(validation)?;
        let all = day_matrix(&joined, scaler)?;
        let first_validation = all
            .dates()
            .iter()
            .position(|d| midnight(*d) >= validation.start())
            .ok_or(Error::InsufficientData { required: 1, actual: 0 })?;
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for d in first_validation.max(1)..all.len() {
            let history = DayMatrix {
                rows: all.rows[..d].to_vec(),
                dates: all.dates[..d].to_vec(),
                scaler,
            };
            let members = model.members(&history)?;
            for t in 0..STEPS_PER_DAY {
                features.push(members.iter().map(|m| m[t]).collect());
                targets.push(all.rows[d][t]);
            }
        }
        let svr = svr_meta_fit(&features, &targets, &cfg.svr)?;
        model.combiner = PsfCombiner::Stacking(svr);
    }
    Ok(model)
}
