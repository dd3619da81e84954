//! Subcommand parsing and execution.

use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveDateTime};
use clap::{Args, Parser, Subcommand};
use gridcast::backtest::{backtest_day_ahead, read_registry, RegistryRecord};
use gridcast::covariates::{build_matrix, COVARIATE_NAMES};
use gridcast::drift::{distribution_stats, first_retrain, monitor, write_events, DriftConfig};
use gridcast::models::{Family, Forecaster, TrainingData};
use gridcast::series::{
    generate_synthetic, ingest_csv, midnight, split, wrangle_with_limit, LevelShift, LoadSeries,
    TIMESTAMP_FORMAT,
};
use serde_json::json;

use crate::config::ExperimentSpec;
use crate::error::{CliError, Result};
use crate::experiment::{load_data, run_experiment_grid, write_file, Dataset, ReportFile, RunOptions};

const DEFAULT_OUT: &str = "gridcast-out";

#[derive(Debug, Parser)]
#[command(name = "gridcast", version, about = "Day-ahead load forecasting pipeline", arg_required_else_help = true)]
pub struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Run seed; overrides the config.
    #[arg(long, global = true, env = "GRIDCAST_SEED")]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Print a JSON summary to stdout instead of text.
    #[arg(long, global = true)]
    pub json: bool,

    /// Parallel grid cells.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic load series as CSV.
    Synth(SynthArgs),
    /// Parse a raw load CSV, fill short gaps and write the clean series.
    Ingest(IngestArgs),
    /// Write the calendar covariate matrix of a series.
    Features(FeaturesArgs),
    /// Fit one model and save its checkpoint.
    Train(TrainArgs),
    /// Day-ahead backtest of a saved model.
    Backtest(BacktestArgs),
    /// Run the experiment grid from the config.
    Grid(GridArgs),
    /// Rolling-error drift monitor over a backtest report.
    Monitor(MonitorArgs),
    /// Print a run registry as a table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// First day (YYYY-MM-DD).
    #[arg(long)]
    pub start: Option<NaiveDate>,
    #[arg(long)]
    pub years: Option<u32>,
    /// Noise standard deviation as a fraction of the base load.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Level shift START:END:SCALE, e.g. 2020-03-01:2020-06-01:0.8. Repeatable.
    #[arg(long, value_parser = parse_shift)]
    pub shift: Vec<LevelShift>,
    /// Destination CSV [default: OUT/synthetic.csv].
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Longest gap, in steps, that is filled by interpolation.
    #[arg(long)]
    pub max_gap: Option<usize>,
    /// Destination CSV [default: OUT/clean.csv].
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// One YYYY-MM-DD date per line.
    #[arg(long)]
    pub holidays: Option<PathBuf>,
    /// Destination CSV [default: OUT/features.csv].
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub family: Family,
    #[arg(long, default_value_t = 0)]
    pub flavor: u8,
    /// Lookback in steps; ignored for PSF.
    #[arg(long, default_value_t = 384)]
    pub lookback: usize,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint path [default: OUT/models/FAMILY_fFLAVOR_lLOOKBACK.json].
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    /// Model checkpoint written by `train` or `grid`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub holidays: Option<PathBuf>,
    /// First test day [default: the config's test start].
    #[arg(long)]
    pub test_start: Option<NaiveDate>,
    /// Day after the last test day [default: config test end, or end of data].
    #[arg(long)]
    pub test_end: Option<NaiveDate>,
    /// Report path [default: OUT/reports/backtest.json].
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Write zero training times to the registry.
    #[arg(long)]
    pub reproducible: bool,
}

#[derive(Debug, Args)]
pub struct MonitorArgs {
    /// Report file written by `grid` or `backtest`.
    #[arg(long)]
    pub report: PathBuf,
    /// Baseline MAPE [default: the report's validation MAPE].
    #[arg(long)]
    pub baseline: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub persistence: Option<usize>,
    /// Series for distribution statistics.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Years to summarise, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub years: Vec<i32>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Registry file [default: OUT/registry.jsonl].
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

fn parse_shift(s: &str) -> std::result::Result<LevelShift, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [start, end, scale] = parts[..] else {
        return Err("expected START:END:SCALE".into());
    };
    let date = |d: &str| NaiveDate::parse_from_str(d, "%Y-%m-%d").map(midnight).map_err(|e| format!("{d}: {e}"));
    Ok(LevelShift {
        start: date(start)?,
        end: date(end)?,
        scale: scale.parse().map_err(|e| format!("{scale}: {e}"))?,
    })
}

/// Resolved global settings.
struct Context {
    spec: ExperimentSpec,
    seed: u64,
    out: PathBuf,
    json: bool,
    jobs: usize,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self> {
        let spec = match &cli.config {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec::default(),
        };
        Ok(Self {
            seed: cli.seed.or(spec.seed).unwrap_or(0),
            out: cli.out.clone().or_else(|| spec.out.clone()).unwrap_or_else(|| DEFAULT_OUT.into()),
            json: cli.json,
            jobs: cli.jobs.or(spec.jobs).unwrap_or(1),
            spec,
        })
    }

    fn data(&self, path: &Option<PathBuf>) -> Result<Dataset> {
        let mut section = self.spec.data.clone();
        if let Some(p) = path {
            section.path = Some(p.clone());
            section.synthetic = None;
        }
        if section.path.is_none() && section.synthetic.is_none() {
            return Err(CliError::Usage("no data: pass --data or set [data] in the config".into()));
        }
        load_data(&section, self.seed)
    }

    fn emit(&self, summary: serde_json::Value, text: impl FnOnce() -> String) -> Result<()> {
        let mut stdout = std::io::stdout().lock();
        let line = if self.json { summary.to_string() } else { text() };
        writeln!(stdout, "{line}").map_err(|e| CliError::io("stdout", e))
    }
}

fn series_summary(s: &LoadSeries) -> serde_json::Value {
    json!({ "points": s.len(), "start": fmt_ts(s.start()), "end": fmt_ts(s.end()) })
}

fn fmt_ts(ts: NaiveDateTime) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

fn write_series(series: &LoadSeries, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    series.write_csv(&mut buf)?;
    write_file(path, &buf)
}

/// Executes a parsed command line.
pub fn execute(cli: Cli) -> Result<()> {
    let ctx = Context::new(&cli)?;
    match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Ingest(a) => ingest(&ctx, a),
        Command::Features(a) => features(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Backtest(a) => backtest(&ctx, a),
        Command::Grid(a) => grid(&ctx, a),
        Command::Monitor(a) => run_monitor(&ctx, a),
        Command::Report(a) => report(&ctx, a),
    }
}

fn synth(ctx: &Context, a: SynthArgs) -> Result<()> {
    let mut spec = ctx.spec.data.synthetic.clone().unwrap_or_default();
    if let Some(start) = a.start {
        spec.start = start;
    }
    if let Some(years) = a.years {
        spec.years = years;
    }
    if let Some(noise) = a.noise {
        spec.noise = noise;
    }
    spec.shifts.extend(a.shift);
    let series = generate_synthetic(&spec, ctx.seed)?;
    let path = a.output.unwrap_or_else(|| ctx.out.join("synthetic.csv"));
    write_series(&series, &path)?;
    let summary = json!({ "output": path, "series": series_summary(&series), "seed": ctx.seed });
    ctx.emit(summary, || {
        format!("wrote {} points ({} to {}) to {}", series.len(), fmt_ts(series.start()), fmt_ts(series.end()), path.display())
    })
}

fn ingest(ctx: &Context, a: IngestArgs) -> Result<()> {
    let path = a
        .data
        .or_else(|| ctx.spec.data.path.clone())
        .ok_or_else(|| CliError::Usage("ingest needs --data".into()))?;
    let raw = ingest_csv(&path)?;
    let series = wrangle_with_limit(&raw, a.max_gap.unwrap_or(ctx.spec.data.max_gap))?;
    let output = a.output.unwrap_or_else(|| ctx.out.join("clean.csv"));
    write_series(&series, &output)?;
    let summary = json!({ "input": path, "raw_rows": raw.len(), "output": output, "series": series_summary(&series) });
    ctx.emit(summary, || {
        format!("{} raw rows -> {} points on the 15-minute grid, written to {}", raw.len(), series.len(), output.display())
    })
}

fn features(ctx: &Context, a: FeaturesArgs) -> Result<()> {
    let mut data = ctx.data(&a.data)?;
    if let Some(h) = &a.holidays {
        data.holidays = gridcast::series::read_holidays(h)?;
    }
    let matrix = build_matrix(&data.series, &data.holidays);
    let mut buf = format!("timestamp,{}\n", COVARIATE_NAMES.join(","));
    for (i, row) in matrix.rows().iter().enumerate() {
        buf.push_str(&fmt_ts(data.series.timestamp(i)));
        for v in row {
            buf.push(',');
            buf.push_str(&v.to_string());
        }
        buf.push('\n');
    }
    let output = a.output.unwrap_or_else(|| ctx.out.join("features.csv"));
    write_file(&output, buf.as_bytes())?;
    let summary = json!({ "output": output, "rows": matrix.len(), "columns": COVARIATE_NAMES });
    ctx.emit(summary, || format!("wrote {} covariate rows to {}", matrix.len(), output.display()))
}

fn train(ctx: &Context, a: TrainArgs) -> Result<()> {
    let data = ctx.data(&a.data)?;
    let segments = split(&data.series, &ctx.spec.split_spec()?)?;
    let lookback = (a.family != Family::Psf).then_some(a.lookback);
    let config = ctx.spec.model.resolve(a.family, a.flavor, lookback)?;
    let mut model = Forecaster::new(config, ctx.seed)?;
    let training = TrainingData {
        train: &segments.train,
        validation: &segments.validation,
        holidays: &data.holidays,
        stride: ctx.spec.training.stride,
    };
    let stats = model.fit(&training, &ctx.spec.training.train_config(ctx.seed))?;
    let output = a.output.unwrap_or_else(|| {
        let l = lookback.map_or(String::new(), |l| format!("_l{l}"));
        ctx.out.join("models").join(format!("{}_f{}{l}.json", a.family, a.flavor))
    });
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    model.save(&output)?;
    let summary = json!({ "model": output, "family": a.family, "flavor": a.flavor, "lookback": lookback, "training": stats });
    ctx.emit(summary, || {
        format!(
            "trained {} flavor {} in {:.1} s ({} epochs, best validation loss {:.4}); saved {}",
            a.family,
            a.flavor,
            stats.wall_seconds,
            stats.epochs_run,
            stats.best_validation_loss,
            output.display()
        )
    })
}

fn backtest(ctx: &Context, a: BacktestArgs) -> Result<()> {
    let model = Forecaster::load(&a.model)?;
    let mut data = ctx.data(&a.data)?;
    if let Some(h) = &a.holidays {
        data.holidays = gridcast::series::read_holidays(h)?;
    }
    let configured = ctx.spec.split.as_ref().map(|s| s.resolve()).transpose()?;
    let test_start = match (a.test_start, configured) {
        (Some(d), _) => midnight(d),
        (None, Some(s)) => s.test_start,
        (None, None) => return Err(CliError::Usage("backtest needs --test-start or a [split] section".into())),
    };
    let series = &data.series;
    let test_end = match (a.test_end, configured) {
        (Some(d), _) => midnight(d),
        (None, Some(s)) if a.data.is_none() => s.test_end,
        // last midnight within the data
        _ => midnight(series.end().date()),
    };
    let history = series.between(series.start(), test_start)?;
    let test = series.between(test_start, test_end)?;
    let span = series.between(series.start(), test_end)?;
    let report = backtest_day_ahead(&model, &history, &test, &build_matrix(&span, &data.holidays))?;
    let file = ReportFile {
        model_id: None,
        family: model.family(),
        flavor: None,
        lookback: model.config().lookback(),
        validation_mape: None,
        report,
    };
    let output = a.output.unwrap_or_else(|| ctx.out.join("reports").join("backtest.json"));
    file.save(&output)?;
    let r = &file.report;
    let record = RegistryRecord::from_report(0, file.family, 0, file.lookback, r);
    let summary = json!({ "report": output, "days": r.days.len(), "overall_mape": r.overall_mape, "seasonal": record.seasonal, "excluded_points": r.excluded_points });
    ctx.emit(summary, || {
        let seasons: Vec<String> = r.per_season_mape.iter().map(|(s, m)| format!("{} {m:.3}", s.as_str())).collect();
        format!(
            "{} days, MAPE {:.3} ({}); report {}",
            r.days.len(),
            r.overall_mape,
            seasons.join(", "),
            output.display()
        )
    })
}

fn grid(ctx: &Context, a: GridArgs) -> Result<()> {
    if ctx.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let opts = RunOptions {
        seed: ctx.seed,
        jobs: ctx.jobs,
        reproducible: a.reproducible || ctx.spec.reproducible,
        out: ctx.out.clone(),
        progress: !ctx.json,
    };
    let outcome = run_experiment_grid(&ctx.spec, &opts)?;
    let failed = outcome.records.iter().filter(|r| r.error.is_some()).count();
    ctx.emit(serde_json::to_value(&outcome)?, || {
        let mut text = format!(
            "{} runs ({failed} failed); registry {}",
            outcome.records.len(),
            outcome.registry.display()
        );
        if let Some(r) = &outcome.rerun {
            text.push_str(&format!("\nre-run: {} runs; registry {}", r.records.len(), r.registry.display()));
        }
        text
    })
}

fn run_monitor(ctx: &Context, a: MonitorArgs) -> Result<()> {
    let file = ReportFile::load(&a.report)?;
    let baseline = a
        .baseline
        .or(file.validation_mape)
        .ok_or_else(|| CliError::Usage("the report has no validation MAPE; pass --baseline".into()))?;
    let cfg = DriftConfig {
        rolling_window_days: a.window.unwrap_or(ctx.spec.monitor.rolling_window_days),
        threshold_ratio: a.ratio.unwrap_or(ctx.spec.monitor.threshold_ratio),
        persistence_days: a.persistence.unwrap_or(ctx.spec.monitor.persistence_days),
    };
    let mut result = monitor(&file.report, baseline, &cfg)?;
    let dir = ctx.out.join("monitor");
    let tag = file.model_id.map_or("report".to_string(), |id| format!("model_{id}"));
    let events_path = dir.join(format!("events_{tag}.jsonl"));
    let mut buf = Vec::new();
    write_events(&mut buf, &result.events)?;
    write_file(&events_path, &buf)?;

    let mut stat_files = Vec::new();
    if !a.years.is_empty() {
        let data = ctx.data(&a.data)?;
        let stats = distribution_stats(&data.series, &a.years)?;
        let mut csvs = [Vec::new(), Vec::new(), Vec::new()];
        stats.write_histogram_csv(&mut csvs[0])?;
        stats.write_monthly_csv(&mut csvs[1])?;
        stats.write_profile_csv(&mut csvs[2])?;
        for (name, buf) in ["histogram.csv", "monthly.csv", "profile.csv"].into_iter().zip(csvs) {
            let path = dir.join(name);
            write_file(&path, &buf)?;
            stat_files.push(path);
        }
        result.stats = Some(stats);
    }

    let first = first_retrain(&result.events);
    let last = result.events.last().map(|e| e.decision);
    let summary = json!({
        "events": events_path,
        "baseline_mape": baseline,
        "threshold": result.state.threshold(),
        "triggered": result.state.triggered,
        "first_retrain": first,
        "last_decision": last,
        "stats": stat_files,
    });
    ctx.emit(summary, || {
        let verdict = match first {
            Some(d) => format!("retrain recommended from {d}"),
            None => "no retrain recommended".into(),
        };
        format!(
            "baseline {baseline:.3}, threshold {:.3}, {} rolling days: {verdict}; events {}",
            result.state.threshold(),
            result.rolling.len(),
            events_path.display()
        )
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.3}"))
}

/// Fixed-width table of registry rows.
pub fn registry_table(records: &[RegistryRecord]) -> String {
    let mut out = format!(
        "{:>5} {:<7} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6} {:>9}\n",
        "model", "family", "flavor", "lookback", "mape", "winter", "spring", "summer", "autumn", "epochs", "train_s"
    );
    for r in records {
        let lookback = r.lookback.map_or("-".into(), |l| l.to_string());
        let epochs = r.epochs.map_or("-".into(), |e| e.to_string());
        out.push_str(&format!(
            "{:>5} {:<7} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6} {:>9.1}",
            r.model_id,
            r.family.to_string(),
            r.flavor,
            lookback,
            opt(r.overall_mape),
            opt(r.seasonal.winter),
            opt(r.seasonal.spring),
            opt(r.seasonal.summer),
            opt(r.seasonal.autumn),
            epochs,
            r.train_wall_seconds
        ));
        if let Some(e) = &r.error {
            out.push_str(&format!("  error: {e}"));
        }
        out.push('\n');
    }
    out
}

fn report(ctx: &Context, a: ReportArgs) -> Result<()> {
    let path = a.registry.unwrap_or_else(|| ctx.out.join("registry.jsonl"));
    let records = read_registry(&path)?;
    ctx.emit(serde_json::to_value(&records)?, || registry_table(&records).trim_end().to_string())
}
