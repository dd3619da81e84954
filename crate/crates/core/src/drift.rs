//! Load distribution statistics and the rolling-error retraining monitor.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{Datelike, NaiveDate, Timelike};
use serde::{Deserialize, Serialize};

use crate::backtest::{mape, BacktestReport};
use crate::error::{Error, Result};
use crate::series::{LoadSeries, STEPS_PER_DAY};

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearStats {
    pub year: i32,
    pub points: usize,
    /// One count per bin of [`DistributionStats::edges`].
    pub counts: Vec<usize>,
    /// January..December; `None` for months without data.
    pub monthly_means: Vec<Option<f64>>,
    /// Mean per 15-minute slot of the day.
    pub daily_profile: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    /// `HISTOGRAM_BINS + 1` edges shared by every year.
    pub edges: Vec<f64>,
    pub years: Vec<YearStats>,
}

fn slot(ts: chrono::NaiveDateTime) -> usize {
    (ts.hour() as usize * 60 + ts.minute() as usize) / 15
}

/// Histogram, monthly means and daily profile for each requested year.
/// Bins span the global min and max over those years.
pub fn distribution_stats(series: &LoadSeries, years: &[i32]) -> Result<DistributionStats> {
    let mut per_year: BTreeMap<i32, Vec<(chrono::NaiveDateTime, f64)>> = years.iter().map(|y| (*y, Vec::new())).collect();
    for (ts, v) in series.timestamps().zip(series.values()) {
        if let Some(bucket) = per_year.get_mut(&ts.year()) {
            bucket.push((ts, *v));
        }
    }
    if let Some((y, _)) = per_year.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::YearNotCovered(*y));
    }
    let all = per_year.values().flatten().map(|(_, v)| *v);
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let edges: Vec<f64> = (0..=HISTOGRAM_BINS).map(|i| lo + width * i as f64).collect();

    let mut out = Vec::with_capacity(years.len());
    for &year in years {
        let points = &per_year[&year];
        let mut counts = vec![0usize; HISTOGRAM_BINS];
        let mut months = [(0.0, 0usize); 12];
        let mut profile = vec![(0.0, 0usize); STEPS_PER_DAY];
        for (ts, v) in points {
            let bin = if width > 0.0 { ((v - lo) / width) as usize } else { 0 };
            counts[bin.min(HISTOGRAM_BINS - 1)] += 1;
            let m = &mut months[ts.month0() as usize];
            m.0 += v;
            m.1 += 1;
            let p = &mut profile[slot(*ts)];
            p.0 += v;
            p.1 += 1;
        }
        out.push(YearStats {
            year,
            points: points.len(),
            counts,
            monthly_means: months.iter().map(|(s, n)| (*n > 0).then(|| s / *n as f64)).collect(),
            daily_profile: profile.iter().map(|(s, n)| if *n > 0 { s / *n as f64 } else { f64::NAN }).collect(),
        });
    }
    Ok(DistributionStats { edges, years: out })
}

impl DistributionStats {
    pub fn write_histogram_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["year", "bin_low", "bin_high", "count"])?;
        for y in &self.years {
            for (i, c) in y.counts.iter().enumerate() {
                w.write_record([y.year.to_string(), self.edges[i].to_string(), self.edges[i + 1].to_string(), c.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("histogram", e))
    }

    pub fn write_monthly_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["year", "month", "mean_mw"])?;
        for y in &self.years {
            for (m, v) in y.monthly_means.iter().enumerate() {
                if let Some(v) = v {
                    w.write_record([y.year.to_string(), (m + 1).to_string(), v.to_string()])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("monthly", e))
    }

    pub fn write_profile_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["year", "slot", "time", "mean_mw"])?;
        for y in &self.years {
            for (s, v) in y.daily_profile.iter().enumerate() {
                let time = format!("{:02}:{:02}", s / 4, (s % 4) * 15);
                w.write_record([y.year.to_string(), s.to_string(), time, v.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("profile", e))
    }
}

/// Trailing per-point MAPE over `window_days` days, one value per full window.
pub fn rolling_mape(report: &BacktestReport, window_days: usize) -> Result<Vec<(NaiveDate, f64)>> {
    if window_days == 0 || window_days > report.days.len() {
        return Err(Error::param(
            "window_days",
            format!("{window_days} not in 1..={}", report.days.len()),
        ));
    }
    report
        .days
        .windows(window_days)
        .map(|w| {
            let actual: Vec<f64> = w.iter().flat_map(|d| d.actual.iter().copied()).collect();
            let forecast: Vec<f64> = w.iter().flat_map(|d| d.forecast.iter().copied()).collect();
            Ok((w[window_days - 1].date, mape(&actual, &forecast)?.value))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftConfig {
    pub rolling_window_days: usize,
    pub threshold_ratio: f64,
    pub persistence_days: usize,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            rolling_window_days: 30,
            threshold_ratio: 1.5,
            persistence_days: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Healthy,
    Watch,
    Retrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftState {
    pub baseline_mape: f64,
    pub rolling_window_days: usize,
    pub threshold_ratio: f64,
    pub persistence_days: usize,
    pub consecutive_breaches: usize,
    pub triggered: bool,
}

impl DriftState {
    pub fn new(baseline_mape: f64, cfg: &DriftConfig) -> Result<Self> {
        if !(baseline_mape.is_finite() && baseline_mape > 0.0) {
            return Err(Error::param("baseline_mape", "must be positive and finite"));
        }
        if !(cfg.threshold_ratio > 1.0) {
            return Err(Error::param("threshold_ratio", "must exceed 1"));
        }
        if cfg.persistence_days == 0 || cfg.rolling_window_days == 0 {
            return Err(Error::param("persistence_days", "window and persistence must be at least 1"));
        }
        Ok(Self {
            baseline_mape,
            rolling_window_days: cfg.rolling_window_days,
            threshold_ratio: cfg.threshold_ratio,
            persistence_days: cfg.persistence_days,
            consecutive_breaches: 0,
            triggered: false,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.baseline_mape * self.threshold_ratio
    }
}

/// Monitor log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub date: NaiveDate,
    pub rolling_mape: f64,
    pub baseline_mape: f64,
    pub decision: Decision,
}

/// Feeds daily rolling values through the breach/persistence rule. A day
/// breaches when its value exceeds `baseline * threshold_ratio`; after
/// `persistence_days` consecutive breaches the state latches `triggered`
/// and every later decision is `retrain`.
pub fn evaluate_drift(mut state: DriftState, rolling: &[(NaiveDate, f64)]) -> (DriftState, Vec<DriftEvent>) {
    let mut events = Vec::with_capacity(rolling.len());
    for &(date, value) in rolling {
        if value > state.threshold() {
            state.consecutive_breaches = (state.consecutive_breaches + 1).min(state.persistence_days);
            if state.consecutive_breaches >= state.persistence_days {
                state.triggered = true;
            }
        } else {
            state.consecutive_breaches = 0;
        }
        let decision = if state.triggered {
            Decision::Retrain
        } else if state.consecutive_breaches > 0 {
            Decision::Watch
        } else {
            Decision::Healthy
        };
        events.push(DriftEvent {
            date,
            rolling_mape: value,
            baseline_mape: state.baseline_mape,
            decision,
        });
    }
    (state, events)
}

/// First day whose decision is `retrain`.
pub fn first_retrain(events: &[DriftEvent]) -> Option<NaiveDate> {
    events.iter().find(|e| e.decision == Decision::Retrain).map(|e| e.date)
}

pub fn write_events<W: Write>(mut out: W, events: &[DriftEvent]) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n").map_err(|e| Error::io("events", e))?;
    }
    Ok(())
}

/// Statistics, rolling errors and the final monitor state of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub stats: Option<DistributionStats>,
    pub rolling: Vec<(NaiveDate, f64)>,
    pub events: Vec<DriftEvent>,
    pub state: DriftState,
}

/// Runs the monitor over a backtest report.
pub fn monitor(report: &BacktestReport, baseline_mape: f64, cfg: &DriftConfig) -> Result<DriftReport> {
    let state = DriftState::new(baseline_mape, cfg)?;
    let rolling = rolling_mape(report, cfg.rolling_window_days.min(report.days.len()))?;
    let (state, events) = evaluate_drift(state, &rolling);
    Ok(DriftReport {
        stats: None,
        rolling,
        events,
        state,
    })
}
