//! The experiment grid: build, fit, backtest and register every cell.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use gridcast::backtest::{backtest_day_ahead, write_registry, BacktestReport, RegistryRecord};
use gridcast::covariates::{build_matrix, CovariateMatrix, HolidaySet};
use gridcast::models::{Family, Forecaster, TrainingData};
use gridcast::series::{generate_synthetic, ingest_csv, read_holidays, split, wrangle_with_limit, LoadSeries, SplitDataset};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{select, Cell, DataSection, ExperimentSpec};
use crate::error::{CliError, Result};

/// A loaded series with its holiday calendar.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub series: LoadSeries,
    pub holidays: HolidaySet,
}

/// Reads and wrangles the CSV, or generates the synthetic series from `seed`.
pub fn load_data(data: &DataSection, seed: u64) -> Result<Dataset> {
    let series = match (&data.path, &data.synthetic) {
        (Some(path), None) => wrangle_with_limit(&ingest_csv(path)?, data.max_gap)?,
        (None, Some(spec)) => generate_synthetic(spec, seed)?,
        _ => return Err(CliError::Config("set exactly one of data.path and data.synthetic".into())),
    };
    let holidays = match &data.holidays {
        Some(path) => read_holidays(path)?,
        None => HolidaySet::new(),
    };
    Ok(Dataset { series, holidays })
}

/// Seed of one grid cell, derived from the run seed and the model ID.
pub fn cell_seed(seed: u64, model_id: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (model_id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything written to `reports/model_{id}.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub model_id: Option<usize>,
    pub family: Family,
    pub flavor: Option<u8>,
    pub lookback: Option<usize>,
    /// Backtest MAPE over the validation segment; the drift baseline.
    pub validation_mape: Option<f64>,
    pub report: BacktestReport,
}

impl ReportFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// Wall-clock timings, kept apart from the registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub model_id: usize,
    pub train_wall_seconds: f64,
    pub backtest_wall_seconds: f64,
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Settings shared by all cells of one run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: u64,
    pub jobs: usize,
    pub reproducible: bool,
    pub out: PathBuf,
    /// Print one progress line per finished cell to stderr.
    pub progress: bool,
}

struct CellOutput {
    record: RegistryRecord,
    timing: Timing,
}

struct Inputs<'a> {
    spec: &'a ExperimentSpec,
    data: &'a SplitDataset,
    history: LoadSeries,
    holidays: &'a HolidaySet,
    covariates: CovariateMatrix,
    opts: &'a RunOptions,
}

fn run_cell(cell: &Cell, inp: &Inputs<'_>) -> Result<CellOutput> {
    let seed = cell_seed(inp.opts.seed, cell.model_id);
    let config = inp.spec.model.resolve(cell.family, cell.flavor, cell.lookback)?;
    let mut model = Forecaster::new(config, seed)?;
    let training = TrainingData {
        train: &inp.data.train,
        validation: &inp.data.validation,
        holidays: inp.holidays,
        stride: inp.spec.training.stride,
    };
    let mut stats = model.fit(&training, &inp.spec.training.train_config(seed))?;
    let train_wall_seconds = stats.wall_seconds;
    if inp.opts.reproducible {
        stats.wall_seconds = 0.0;
    }

    let started = Instant::now();
    let validation = backtest_day_ahead(&model, &inp.data.train, &inp.data.validation, &inp.covariates)?;
    let mut report = backtest_day_ahead(&model, &inp.history, &inp.data.test, &inp.covariates)?;
    let backtest_wall_seconds = started.elapsed().as_secs_f64();
    report.model_id = cell.model_id.to_string();
    report.training_stats = stats;

    let id = cell.model_id;
    let checkpoint = inp.opts.out.join("models").join(format!("model_{id}.json"));
    write_file(&checkpoint, model.to_json()?.as_bytes())?;
    let file = ReportFile {
        model_id: Some(id),
        family: cell.family,
        flavor: Some(cell.flavor),
        lookback: cell.lookback,
        validation_mape: Some(validation.overall_mape),
        report,
    };
    file.save(&inp.opts.out.join("reports").join(format!("model_{id}.json")))?;
    Ok(CellOutput {
        record: RegistryRecord::from_report(id, cell.family, cell.flavor, cell.lookback, &file.report),
        timing: Timing {
            model_id: id,
            train_wall_seconds,
            backtest_wall_seconds,
        },
    })
}

/// Runs a cell, turning errors and panics into a failed registry row.
fn run_isolated(cell: &Cell, inp: &Inputs<'_>) -> CellOutput {
    let failed = |message: String| {
        CellOutput {
            record: RegistryRecord::failed(cell.model_id, cell.family, cell.flavor, cell.lookback, message),
            timing: Timing {
                model_id: cell.model_id,
                train_wall_seconds: 0.0,
                backtest_wall_seconds: 0.0,
            },
        }
    };
    match catch_unwind(AssertUnwindSafe(|| run_cell(cell, inp))) {
        Ok(Ok(out)) => out,
        Ok(Err(e)) => failed(e.to_string()),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            failed(format!("panic: {msg}"))
        }
    }
}

/// Appends finished cells to the registry strictly in grid order.
struct OrderedSink {
    next: usize,
    pending: BTreeMap<usize, CellOutput>,
    registry: PathBuf,
    timings: PathBuf,
    records: Vec<RegistryRecord>,
    error: Option<CliError>,
}

impl OrderedSink {
    fn push(&mut self, index: usize, out: CellOutput) {
        self.pending.insert(index, out);
        while let Some(out) = self.pending.remove(&self.next) {
            if self.error.is_none() {
                if let Err(e) = self.append(&out) {
                    self.error = Some(e);
                }
            }
            self.records.push(out.record);
            self.next += 1;
        }
    }

    fn append(&self, out: &CellOutput) -> Result<()> {
        append_lines(&self.registry, |w| Ok(write_registry(w, std::slice::from_ref(&out.record))?))?;
        append_lines(&self.timings, |w| {
            serde_json::to_writer(&mut *w, &out.timing)?;
            w.write_all(b"\n").map_err(|e| CliError::io(&self.timings, e))
        })
    }
}

fn append_lines(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    file.write_all(&buf).map_err(|e| CliError::io(path, e))
}

/// Fits and backtests `cells` on `data`, writing checkpoints, reports,
/// `registry.jsonl` and `timings.jsonl` under `opts.out`. Cell failures
/// become registry rows with an `error` field; other cells continue.
pub fn run_cells(
    cells: &[Cell],
    spec: &ExperimentSpec,
    data: &SplitDataset,
    holidays: &HolidaySet,
    opts: &RunOptions,
) -> Result<Vec<RegistryRecord>> {
    std::fs::create_dir_all(&opts.out).map_err(|e| CliError::io(&opts.out, e))?;
    let mut history = data.train.clone();
    history.extend(&data.validation)?;
    let inputs = Inputs {
        spec,
        data,
        history,
        holidays,
        covariates: build_matrix(&data.joined(), holidays),
        opts,
    };
    let sink = Mutex::new(OrderedSink {
        next: 0,
        pending: BTreeMap::new(),
        registry: opts.out.join("registry.jsonl"),
        timings: opts.out.join("timings.jsonl"),
        records: Vec::with_capacity(cells.len()),
        error: None,
    });
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {} worker threads: {e}", opts.jobs)))?;
    pool.install(|| {
        cells.par_iter().enumerate().for_each(|(i, cell)| {
            let out = run_isolated(cell, &inputs);
            if opts.progress {
                eprintln!("{}", progress_line(&out));
            }
            sink.lock().expect("registry writer poisoned").push(i, out);
        })
    });
    let sink = sink.into_inner().expect("registry writer poisoned");
    match sink.error {
        Some(e) => Err(e),
        None => Ok(sink.records),
    }
}

fn progress_line(out: &CellOutput) -> String {
    let r = &out.record;
    let lookback = r.lookback.map_or("-".into(), |l| l.to_string());
    let what = format!("model {:>2} {:<6} flavor {} lookback {:>4}", r.model_id, r.family, r.flavor, lookback);
    match (&r.error, r.overall_mape) {
        (Some(e), _) => format!("{what}: FAILED {e}"),
        (None, Some(m)) => format!("{what}: MAPE {m:.3} ({:.1} s training)", out.timing.train_wall_seconds),
        (None, None) => format!("{what}: no result"),
    }
}

/// Outcome of `grid`: the main registry and the optional re-run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub registry: PathBuf,
    pub records: Vec<RegistryRecord>,
    pub rerun: Option<Box<GridOutcome>>,
}

/// Runs the configured grid, then the `[rerun]` models on their split
/// under `out/rerun`.
pub fn run_experiment_grid(spec: &ExperimentSpec, opts: &RunOptions) -> Result<GridOutcome> {
    spec.validate()?;
    let dataset = load_data(&spec.data, opts.seed)?;
    let cells = spec.grid.cells()?;
    let data = split(&dataset.series, &spec.split_spec()?)?;
    let records = run_cells(&cells, spec, &data, &dataset.holidays, opts)?;
    let rerun = match &spec.rerun {
        None => None,
        Some(r) => {
            let cells = select(&spec.grid.all_cells(), &r.models)?;
            let data = split(&dataset.series, &r.split.resolve()?)?;
            let sub = RunOptions {
                out: opts.out.join("rerun"),
                ..opts.clone()
            };
            let records = run_cells(&cells, spec, &data, &dataset.holidays, &sub)?;
            Some(Box::new(GridOutcome {
                registry: sub.out.join("registry.jsonl"),
                records,
                rerun: None,
            }))
        }
    };
    Ok(GridOutcome {
        registry: opts.out.join("registry.jsonl"),
        records,
        rerun,
    })
}
