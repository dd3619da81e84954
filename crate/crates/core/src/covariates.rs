//! Calendar covariates: year, cyclic month / day-of-year / day-of-week /
//! week-of-year encodings and a holiday flag.
//!
//! Angles start at zero for January, day 1 of the year, Monday and week 1.
//! Weeks are plain day-count weeks, `floor((doy - 1) / 7) + 1`, so they run
//! 1..=53 and never straddle a year boundary.

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use chrono::{Datelike, NaiveDate, NaiveDateTime};

use crate::series::LoadSeries;

pub const COVARIATE_WIDTH: usize = 10;

pub const COVARIATE_NAMES: [&str; COVARIATE_WIDTH] = [
    "year", "month_sin", "month_cos", "doy_sin", "doy_cos", "dow_sin", "dow_cos", "woy_sin",
    "woy_cos", "holiday",
];

pub type HolidaySet = BTreeSet<NaiveDate>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovariateVector {
    pub year: i32,
    pub month_sin: f64,
    pub month_cos: f64,
    pub doy_sin: f64,
    pub doy_cos: f64,
    pub dow_sin: f64,
    pub dow_cos: f64,
    pub woy_sin: f64,
    pub woy_cos: f64,
    pub holiday: bool,
}

impl CovariateVector {
    pub fn to_array(&self) -> [f64; COVARIATE_WIDTH] {
        [
            self.year as f64,
            self.month_sin,
            self.month_cos,
            self.doy_sin,
            self.doy_cos,
            self.dow_sin,
            self.dow_cos,
            self.woy_sin,
            self.woy_cos,
            if self.holiday { 1.0 } else { 0.0 },
        ]
    }
}

pub fn encode_timestamp(ts: NaiveDateTime, holidays: &HolidaySet) -> CovariateVector {
    let date = ts.date();
    let days_in_year = if date.leap_year() { 366.0 } else { 365.0 };
    let doy = date.ordinal() as f64;
    let week = ((date.ordinal() - 1) / 7 + 1) as f64;

    let month = TAU * (date.month0() as f64) / 12.0;
    let doy = TAU * (doy - 1.0) / days_in_year;
    let dow = TAU * (date.weekday().num_days_from_monday() as f64) / 7.0;
    let woy = TAU * (week - 1.0) / 53.0;

    CovariateVector {
        year: date.year(),
        month_sin: month.sin(),
        month_cos: month.cos(),
        doy_sin: doy.sin(),
        doy_cos: doy.cos(),
        dow_sin: dow.sin(),
        dow_cos: dow.cos(),
        woy_sin: woy.sin(),
        woy_cos: woy.cos(),
        holiday: holidays.contains(&date),
    }
}

/// Row-major `len x 10` matrix aligned one-to-one with a series' timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateMatrix {
    start: NaiveDateTime,
    rows: Vec<[f64; COVARIATE_WIDTH]>,
}

impl CovariateMatrix {
    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    pub fn rows(&self) -> &[[f64; COVARIATE_WIDTH]] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        COVARIATE_WIDTH
    }

    pub fn row(&self, index: usize) -> &[f64; COVARIATE_WIDTH] {
        &self.rows[index]
    }
}

pub fn build_matrix(series: &LoadSeries, holidays: &HolidaySet) -> CovariateMatrix {
    CovariateMatrix {
        start: series.start(),
        rows: series
            .timestamps()
            .map(|ts| encode_timestamp(ts, holidays).to_array())
            .collect(),
    }
}

/// Covariates for `len` grid steps starting at `start`, for spans that are
/// not (yet) backed by observed load.
pub fn build_for_span(start: NaiveDateTime, len: usize, holidays: &HolidaySet) -> CovariateMatrix {
    CovariateMatrix {
        start,
        rows: (0..len)
            .map(|i| {
                let ts = start + chrono::Duration::minutes(15 * i as i64);
                encode_timestamp(ts, holidays).to_array()
            })
            .collect(),
    }
}
