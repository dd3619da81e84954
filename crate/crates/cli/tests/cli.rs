//! Drives the `gridcast` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gridcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridcast"))
        .args(args)
        .env_remove("GRIDCAST_SEED")
        .output()
        .expect("spawn gridcast")
}

fn ok_json(args: &[&str]) -> Value {
    let out = gridcast(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json summary")
}

fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = gridcast(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_and_flag_exit_2() {
    assert_eq!(gridcast(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(gridcast(&["report", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(gridcast(&["train", "--family", "arima"]).status.code(), Some(2));
}

#[test]
fn missing_data_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridcast(&["--out", s(dir.path()), "features"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = gridcast(&["--out", s(dir.path()), "ingest", "--data", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[grid]\nfamilies = [\"psf\"]\nbogus = 1\n").unwrap();
    let out = gridcast(&["--config", s(&bad), "grid"]);
    assert_eq!(out.status.code(), Some(1));
}

const FLOW_CONFIG: &str = r#"
[split]
train_start = "2019-01-01"
validation_start = "2019-09-01"
test_start = "2019-11-01"
test_end = "2020-01-01"

[training]
max_epochs = 2
stride = 48

[model.nbeats]
stacks = 2
layer_width = 16
"#;

#[test]
fn single_model_flow() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let config = out.join("flow.toml");
    std::fs::write(&config, FLOW_CONFIG).unwrap();
    let base = ["--config", s(&config), "--out", s(out), "--seed", "5", "--json"];
    let run = |extra: &[&str]| {
        let mut args = base.to_vec();
        args.extend_from_slice(extra);
        ok_json(&args)
    };

    let synth = run(&["synth", "--start", "2019-01-01", "--years", "1"]);
    assert_eq!(synth["series"]["points"], 365 * 96);
    let raw = out.join("synthetic.csv");
    assert!(raw.exists());

    let clean = run(&["ingest", "--data", s(&raw)]);
    assert_eq!(clean["series"]["points"], 365 * 96);
    let clean_csv = out.join("clean.csv");

    let features = run(&["features", "--data", s(&clean_csv)]);
    assert_eq!(features["rows"], 365 * 96);
    let header = std::fs::read_to_string(out.join("features.csv")).unwrap();
    assert!(header.starts_with("timestamp,"));

    let trained = run(&["train", "--family", "nbeats", "--lookback", "192", "--data", s(&clean_csv)]);
    let model = trained["model"].as_str().unwrap().to_string();
    assert!(Path::new(&model).exists());
    assert_eq!(trained["training"]["epochs_run"], 2);

    let bt = run(&["backtest", "--model", &model, "--data", s(&clean_csv), "--test-start", "2019-11-01"]);
    assert_eq!(bt["days"], 61);
    let mape = bt["overall_mape"].as_f64().unwrap();
    assert!(mape.is_finite() && mape > 0.0);
    let report = bt["report"].as_str().unwrap().to_string();

    let mon = run(&["monitor", "--report", &report, "--baseline", "1.0", "--window", "7", "--data", s(&clean_csv), "--years", "2019"]);
    assert_eq!(mon["baseline_mape"], 1.0);
    let events = lines(Path::new(mon["events"].as_str().unwrap()));
    assert_eq!(events.len(), 61 - 7 + 1);
    assert_eq!(mon["stats"].as_array().unwrap().len(), 3);

    let missing = gridcast(&["--out", s(out), "report", "--registry", s(&out.join("nope.jsonl"))]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn seed_from_environment_matches_flag() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let flag = gridcast(&["--seed", "9", "synth", "--years", "1", "-o", s(&a)]);
    assert!(flag.status.success());
    let env = Command::new(env!("CARGO_BIN_EXE_gridcast"))
        .args(["synth", "--years", "1", "-o", s(&b)])
        .env("GRIDCAST_SEED", "9")
        .output()
        .unwrap();
    assert!(env.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

const GRID_CONFIG: &str = r#"
seed = 3
reproducible = true

[data.synthetic]
start = "2019-01-01"
years = 2
shifts = [{ start = "2020-03-15T00:00:00", end = "2020-06-01T00:00:00", scale = 0.8 }]

[split]
train_start = "2019-01-01"
validation_start = "2019-10-01"
test_start = "2019-12-01"
test_end = "2020-01-01"

[training]
max_epochs = 1
batch_size = 64
stride = 96

[model.nbeats]
stacks = 2
layer_width = 8

[model.lstm]
recurrent_layers = 1
hidden_dim = 4

[model.tcn]
num_filters = 2

[model.psf]
windows = [1, 2]
k_max = 4
restarts = 1

[rerun]
models = [4, 12, 18]
split = { train_start = "2019-01-01", validation_start = "2019-10-01", test_start = "2020-01-01", test_end = "2020-12-31" }
"#;

#[test]
fn full_grid_with_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("grid.toml");
    std::fs::write(&config, GRID_CONFIG).unwrap();
    let out = dir.path().join("run");
    let summary = ok_json(&["--config", s(&config), "--out", s(&out), "--jobs", "2", "--json", "grid"]);

    let rows = lines(&out.join("registry.jsonl"));
    assert_eq!(rows.len(), 20);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row["model_id"], i);
        assert!(row.get("error").is_none_or(Value::is_null), "row {i}: {row}");
        assert_eq!(row["train_wall_seconds"], 0.0);
    }
    let families: Vec<&str> = rows.iter().map(|r| r["family"].as_str().unwrap()).collect();
    assert_eq!(&families[..2], ["psf", "psf"]);
    assert!(families[2..8].iter().all(|f| *f == "nbeats"));
    assert!(families[8..14].iter().all(|f| *f == "lstm"));
    assert!(families[14..].iter().all(|f| *f == "tcn"));
    assert_eq!(rows[4]["lookback"], 960);
    assert_eq!(rows[12]["lookback"], 672);
    assert_eq!(rows[12]["flavor"], 1);
    assert!(rows[0]["epochs"].is_null());
    assert_eq!(lines(&out.join("timings.jsonl")).len(), 20);
    assert!(out.join("models").join("model_19.json").exists());

    let rerun = lines(&out.join("rerun").join("registry.jsonl"));
    let ids: Vec<u64> = rerun.iter().map(|r| r["model_id"].as_u64().unwrap()).collect();
    assert_eq!(ids, [4, 12, 18]);
    for row in &rerun {
        for season in ["winter", "spring", "summer", "autumn"] {
            assert!(row["seasonal"][season].as_f64().is_some(), "{row}");
        }
    }
    assert!(summary["rerun"].is_object());

    let table = gridcast(&["--out", s(&out), "report"]);
    assert!(table.status.success());
    let text = String::from_utf8(table.stdout).unwrap();
    assert_eq!(text.lines().count(), 21);
    assert!(text.starts_with(&format!("{:>5}", "model")));
}

#[test]
fn single_cell_grid() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("one.toml");
    let text = GRID_CONFIG.split("[rerun]").next().unwrap().replace("years = 2", "years = 1")
        + "\n[grid]\nmodels = [1]\n";
    let text = text.replace("shifts = [{ start = \"2020-03-15T00:00:00\", end = \"2020-06-01T00:00:00\", scale = 0.8 }]\n", "");
    std::fs::write(&config, text).unwrap();
    let out = dir.path().join("run");
    let summary = ok_json(&["--config", s(&config), "--out", s(&out), "--json", "grid"]);
    let rows = lines(&out.join("registry.jsonl"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["model_id"], 1);
    assert_eq!(rows[0]["family"], "psf");
    assert_eq!(rows[0]["flavor"], 1);
    assert!(summary["rerun"].is_null());
}
