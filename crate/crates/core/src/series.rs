//! Ingestion, cleaning, splitting and synthesis of 15-minute load series.
//!
//! Timestamps are naive local time. Daylight-saving transitions show up in
//! raw data as a duplicated hour (autumn) or a missing hour (spring); both are
//! absorbed by [`wrangle`], which keeps the first of any duplicate and fills
//! short interior gaps by linear interpolation.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STEP_MINUTES: i64 = 15;
pub const STEPS_PER_DAY: usize = 96;
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M";

/// Default number of consecutive missing steps [`wrangle`] will interpolate.
pub const DEFAULT_MAX_GAP: usize = 96;

pub fn step() -> Duration {
    Duration::minutes(STEP_MINUTES)
}

pub fn is_on_grid(ts: NaiveDateTime) -> bool {
    ts.minute() % 15 == 0 && ts.second() == 0 && ts.nanosecond() == 0
}

pub fn midnight(date: NaiveDate) -> NaiveDateTime {
    date.and_hms_opt(0, 0, 0).expect("midnight is always valid")
}

fn steps_between(from: NaiveDateTime, to: NaiveDateTime) -> i64 {
    (to - from).num_minutes() / STEP_MINUTES
}

/// Timestamped observations as read from disk, before cleaning.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    entries: Vec<(NaiveDateTime, f64)>,
}

impl RawSeries {
    /// Sorts the entries by timestamp (stable, so duplicates keep their input
    /// order) after checking grid alignment and finiteness.
    pub fn new(mut entries: Vec<(NaiveDateTime, f64)>) -> Result<Self> {
        for (i, (ts, v)) in entries.iter().enumerate() {
            let line = i as u64 + 1;
            if !is_on_grid(*ts) {
                return Err(Error::Misaligned {
                    line,
                    timestamp: ts.format(TIMESTAMP_FORMAT).to_string(),
                });
            }
            if !v.is_finite() {
                return Err(Error::NonFiniteLoad { line });
            }
        }
        entries.sort_by_key(|(ts, _)| *ts);
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(NaiveDateTime, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A gap-free, duplicate-free 15-minute load series in megawatts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSeries {
    start: NaiveDateTime,
    values: Vec<f64>,
}

impl LoadSeries {
    pub fn new(start: NaiveDateTime, values: Vec<f64>) -> Result<Self> {
        if !is_on_grid(start) {
            return Err(Error::Misaligned {
                line: 0,
                timestamp: start.format(TIMESTAMP_FORMAT).to_string(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoad { line: i as u64 + 1 });
        }
        Ok(Self { start, values })
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    /// Exclusive end: the timestamp one step after the last value.
    pub fn end(&self) -> NaiveDateTime {
        self.timestamp(self.values.len())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, index: usize) -> NaiveDateTime {
        self.start + Duration::minutes(STEP_MINUTES * index as i64)
    }

    pub fn timestamps(&self) -> impl Iterator<Item = NaiveDateTime> + '_ {
        (0..self.values.len()).map(move |i| self.timestamp(i))
    }

    /// Index of `ts` within the series, if it is on the grid and inside the span.
    pub fn index_of(&self, ts: NaiveDateTime) -> Option<usize> {
        if !is_on_grid(ts) || ts < self.start {
            return None;
        }
        let idx = steps_between(self.start, ts) as usize;
        (idx < self.values.len()).then_some(idx)
    }

    /// Sub-series covering `[from, to)`. Both bounds must lie on the grid
    /// within `[start, end]`.
    pub fn between(&self, from: NaiveDateTime, to: NaiveDateTime) -> Result<LoadSeries> {
        if !is_on_grid(from) || !is_on_grid(to) || from < self.start || to > self.end() || from > to
        {
            return Err(Error::InvalidSplit(format!(
                "range {from} .. {to} is outside {} .. {}",
                self.start,
                self.end()
            )));
        }
        let a = steps_between(self.start, from) as usize;
        let b = steps_between(self.start, to) as usize;
        Ok(LoadSeries {
            start: from,
            values: self.values[a..b].to_vec(),
        })
    }

    /// Appends a series that starts exactly where this one ends.
    pub fn extend(&mut self, next: &LoadSeries) -> Result<()> {
        if next.start != self.end() {
            return Err(Error::InvalidSplit(format!(
                "cannot append series starting {} to series ending {}",
                next.start,
                self.end()
            )));
        }
        self.values.extend_from_slice(&next.values);
        Ok(())
    }

    /// Trims leading and trailing partial days so the series starts at
    /// 00:00 and its length is a multiple of 96.
    pub fn day_aligned(&self) -> LoadSeries {
        let mut first = self.start.date();
        if self.start.time() != midnight(first).time() {
            first = first.succ_opt().expect("date in range");
        }
        let from = midnight(first);
        let skip = steps_between(self.start, from).max(0) as usize;
        let whole_days = self.values.len().saturating_sub(skip) / STEPS_PER_DAY;
        let take = whole_days * STEPS_PER_DAY;
        LoadSeries {
            start: from,
            values: self.values[skip.min(self.values.len())..][..take].to_vec(),
        }
    }

    pub fn to_raw(&self) -> RawSeries {
        RawSeries {
            entries: self.timestamps().zip(self.values.iter().copied()).collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["timestamp", "load_mw"])?;
        for (ts, v) in self.timestamps().zip(&self.values) {
            w.write_record([ts.format(TIMESTAMP_FORMAT).to_string(), v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S"))
        .ok()
}

/// Reads a `timestamp,load_mw` CSV file.
pub fn ingest_csv(path: impl AsRef<Path>) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file)
}

pub fn ingest_reader<R: Read>(reader: R) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() != 2 || &header[0] != "timestamp" || &header[1] != "load_mw" {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header 'timestamp,load_mw', found '{}'", header.iter().collect::<Vec<_>>().join(",")),
        });
    }

    let mut entries = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let ts = parse_timestamp(&record[0]).ok_or_else(|| Error::Parse {
            line,
            message: format!("invalid timestamp '{}'", &record[0]),
        })?;
        if !is_on_grid(ts) {
            return Err(Error::Misaligned {
                line,
                timestamp: record[0].to_string(),
            });
        }
        let load: f64 = record[1].parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid load value '{}'", &record[1]),
        })?;
        if !load.is_finite() {
            return Err(Error::NonFiniteLoad { line });
        }
        entries.push((ts, load));
    }
    entries.sort_by_key(|(ts, _)| *ts);
    Ok(RawSeries { entries })
}

/// Reads a holiday calendar: one `YYYY-MM-DD` per line. Blank lines and
/// lines starting with `#` are ignored.
pub fn read_holidays(path: impl AsRef<Path>) -> Result<BTreeSet<NaiveDate>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_holidays(&text)
}

pub fn parse_holidays(text: &str) -> Result<BTreeSet<NaiveDate>> {
    let mut out = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let date = NaiveDate::parse_from_str(line, "%Y-%m-%d").map_err(|_| Error::Parse {
            line: i as u64 + 1,
            message: format!("invalid date '{line}'"),
        })?;
        out.insert(date);
    }
    Ok(out)
}

pub fn wrangle(raw: &RawSeries) -> Result<LoadSeries> {
    wrangle_with_limit(raw, DEFAULT_MAX_GAP)
}

/// Collapses duplicates (first occurrence wins) and linearly interpolates
/// interior gaps of at most `max_gap` missing steps.
pub fn wrangle_with_limit(raw: &RawSeries, max_gap: usize) -> Result<LoadSeries> {
    let mut iter = raw.entries.iter();
    let &(start, first) = iter.next().ok_or(Error::EmptySeries)?;
    let mut values = vec![first];
    let mut prev = (start, first);
    for &(ts, v) in iter {
        let steps = steps_between(prev.0, ts);
        if steps == 0 {
            continue;
        }
        let missing = (steps - 1) as usize;
        if missing > max_gap {
            return Err(Error::GapTooLong {
                after: prev.0,
                missing,
                limit: max_gap,
            });
        }
        for j in 1..steps {
            let frac = j as f64 / steps as f64;
            values.push(prev.1 + (v - prev.1) * frac);
        }
        values.push(v);
        prev = (ts, v);
    }
    Ok(LoadSeries { start, values })
}

/// Boundaries of a train / validation / test split. Each segment runs up to
/// (excluding) the next boundary; the test segment ends at `test_end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_start: NaiveDateTime,
    pub validation_start: NaiveDateTime,
    pub test_start: NaiveDateTime,
    pub test_end: NaiveDateTime,
}

impl SplitSpec {
    /// Calendar-year split, e.g. train 2009..=2017, validation 2018, test 2019.
    pub fn from_years(
        train_years: std::ops::RangeInclusive<i32>,
        validation_year: i32,
        test_year: i32,
    ) -> Result<Self> {
        if train_years.is_empty()
            || *train_years.end() + 1 != validation_year
            || validation_year + 1 != test_year
        {
            return Err(Error::InvalidSplit(format!(
                "years must be contiguous: train {}..={}, validation {validation_year}, test {test_year}",
                train_years.start(),
                train_years.end()
            )));
        }
        Ok(Self {
            train_start: year_start(*train_years.start())?,
            validation_start: year_start(validation_year)?,
            test_start: year_start(test_year)?,
            test_end: year_start(test_year + 1)?,
        })
    }

    fn validate(&self) -> Result<()> {
        let b = [self.train_start, self.validation_start, self.test_start, self.test_end];
        if b.iter().any(|t| !is_on_grid(*t)) || !b.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidSplit(format!(
                "boundaries must be on the grid and strictly increasing: {b:?}"
            )));
        }
        Ok(())
    }
}

fn year_start(year: i32) -> Result<NaiveDateTime> {
    NaiveDate::from_ymd_opt(year, 1, 1)
        .map(midnight)
        .ok_or(Error::YearNotCovered(year))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: LoadSeries,
    pub validation: LoadSeries,
    pub test: LoadSeries,
    pub spec: SplitSpec,
}

impl SplitDataset {
    /// Train, validation and test joined back into one contiguous series.
    pub fn joined(&self) -> LoadSeries {
        let mut all = self.train.clone();
        all.extend(&self.validation).expect("segments are contiguous");
        all.extend(&self.test).expect("segments are contiguous");
        all
    }
}

pub fn split(series: &LoadSeries, spec: &SplitSpec) -> Result<SplitDataset> {
    spec.validate()?;
    Ok(SplitDataset {
        train: series.between(spec.train_start, spec.validation_start)?,
        validation: series.between(spec.validation_start, spec.test_start)?,
        test: series.between(spec.test_start, spec.test_end)?,
        spec: *spec,
    })
}

/// Cuts the series at January 1st boundaries.
pub fn split_by_years(
    series: &LoadSeries,
    train_years: std::ops::RangeInclusive<i32>,
    validation_year: i32,
    test_year: i32,
) -> Result<SplitDataset> {
    let spec = SplitSpec::from_years(train_years.clone(), validation_year, test_year)?;
    for year in train_years.chain([validation_year, test_year]) {
        let (from, to) = (year_start(year)?, year_start(year + 1)?);
        if from < series.start() || to > series.end() {
            return Err(Error::YearNotCovered(year));
        }
    }
    split(series, &spec)
}

/// Multiplicative level change applied over `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelShift {
    pub start: NaiveDateTime,
    pub end: NaiveDateTime,
    /// Multiplier; 0.8 is a 20% drop.
    pub scale: f64,
}

/// Parameters of the synthetic load generator. Amplitudes and noise are
/// fractions of `base_mw`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub start: NaiveDate,
    pub years: u32,
    pub base_mw: f64,
    pub daily_amplitude: f64,
    pub weekly_amplitude: f64,
    pub yearly_amplitude: f64,
    pub noise: f64,
    pub shifts: Vec<LevelShift>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(2009, 1, 1).expect("valid date"),
            years: 1,
            base_mw: 5000.0,
            daily_amplitude: 0.20,
            weekly_amplitude: 0.05,
            yearly_amplitude: 0.10,
            noise: 0.02,
            shifts: Vec::new(),
        }
    }
}

impl SyntheticSpec {
    /// Deterministic part of the load at `ts`, before noise and shifts.
    ///
    /// ```text
    /// base * (1 - daily * cos(2π tod)
    ///           + weekly * cos(2π (dow + tod - 2) / 7)
    ///           + yearly * cos(2π (doy - 1 + tod - 15) / 365.25))
    /// ```
    /// with `tod` the fraction of the day elapsed, `dow` Monday = 0 and
    /// `doy` the 1-based day of year.
    pub fn harmonic_mw(&self, ts: NaiveDateTime) -> f64 {
        use std::f64::consts::TAU;
        let tod = (ts.hour() * 60 + ts.minute()) as f64 / 1440.0;
        let dow = ts.weekday().num_days_from_monday() as f64;
        let doy = ts.ordinal() as f64;
        self.base_mw
            * (1.0 - self.daily_amplitude * (TAU * tod).cos()
                + self.weekly_amplitude * (TAU * (dow + tod - 2.0) / 7.0).cos()
                + self.yearly_amplitude * (TAU * (doy - 1.0 + tod - 15.0) / 365.25).cos())
    }

    pub fn shift_factor(&self, ts: NaiveDateTime) -> f64 {
        self.shifts
            .iter()
            .filter(|s| ts >= s.start && ts < s.end)
            .map(|s| s.scale)
            .product()
    }

    fn validate(&self) -> Result<()> {
        if self.years < 1 {
            return Err(Error::param("years", "must be at least 1"));
        }
        let checks = [
            ("base_mw", self.base_mw),
            ("daily_amplitude", self.daily_amplitude),
            ("weekly_amplitude", self.weekly_amplitude),
            ("yearly_amplitude", self.yearly_amplitude),
            ("noise", self.noise),
        ];
        for (name, v) in checks {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(name, format!("must be finite and non-negative, got {v}")));
            }
        }
        if let Some(s) = self.shifts.iter().find(|s| !(s.scale.is_finite() && s.scale > 0.0) || s.end <= s.start) {
            return Err(Error::param("shifts", format!("invalid level shift {s:?}")));
        }
        Ok(())
    }
}

/// Generates `spec.years` calendar years of 15-minute load starting at
/// `spec.start` 00:00. Identical `(spec, seed)` pairs give identical series.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<LoadSeries> {
    spec.validate()?;
    let end_date = spec
        .start
        .checked_add_months(chrono::Months::new(12 * spec.years))
        .ok_or_else(|| Error::param("years", "end date out of range"))?;
    let start = midnight(spec.start);
    let n = steps_between(start, midnight(end_date)) as usize;
    let sigma = spec.noise * spec.base_mw;
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::param("noise", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n)
        .map(|i| {
            let ts = start + Duration::minutes(STEP_MINUTES * i as i64);
            let eps = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (spec.harmonic_mw(ts) + eps) * spec.shift_factor(ts)
        })
        .collect();
    LoadSeries::new(start, values)
}
