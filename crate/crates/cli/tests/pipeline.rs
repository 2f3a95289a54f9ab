use std::path::{Path, PathBuf};

use codtox::config::{DatasetConfig, LoadedConfig, RunConfig};
use codtox::error::{AppError, EXIT_DATA, EXIT_OK, EXIT_STAGE, EXIT_USAGE};
use codtox::manifest::{RunStatus, StageStatus};
use codtox::run::{evaluate_stage, load_reports, Runner};
use codtox::{dispatch, run_experiment, RunManifest, RunOptions, Until};
use codtox_core::metrics::{DatasetTag, MetricReport};
use serde_json::{json, Value};

fn classic_models() -> Value {
    json!([
        {"name": "lr", "family": "classic_single",
         "embedding": {"backend": "synthetic_static", "dim": 24, "seed": 1},
         "grids": [{"architecture": "logistic_regression", "grid": {"c": [1.0]}}],
         "n_folds": 3},
        {"name": "rf", "family": "classic_multi",
         "embedding": {"backend": "synthetic_static", "dim": 24, "seed": 1},
         "grid": {"architecture": "random_forest", "grid": {"n_estimators": [15], "max_depth": [8]}}},
        {"name": "echo", "family": "llm", "client": {"kind": "gold_echo"}, "prompt": {"k": 3}, "concurrency": 2}
    ])
}

fn config(out: &Path, models: Value, extra: Value) -> RunConfig {
    let mut v = json!({
        "name": "t",
        "dataset": {"source": "synthetic", "n_cases": 300, "seed": 8},
        "models": models,
        "seed": 5,
        "bootstrap": {"n_resamples": 40, "level": 0.95},
        "output_dir": out,
    });
    for (k, x) in extra.as_object().unwrap() {
        v[k] = x.clone();
    }
    serde_json::from_value(v).unwrap()
}

fn loaded(c: RunConfig) -> LoadedConfig {
    LoadedConfig::from_config(c).unwrap()
}

fn read_report(dir: &Path, rel: &str) -> MetricReport {
    serde_json::from_str(&std::fs::read_to_string(dir.join(rel)).unwrap()).unwrap()
}

fn write_config(dir: &Path, c: &RunConfig) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(c).unwrap()).unwrap();
    p
}

fn run_cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("codtox").chain(args.iter().copied());
    let code = dispatch(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

#[test]
fn families_share_the_split_and_reruns_reuse_everything() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    let cfg = loaded(config(&root, classic_models(), json!({})));
    let first = run_experiment(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(first.dir, root);
    assert_eq!(first.manifest.status, RunStatus::Complete);
    assert!(!first.manifest.reused);
    first.manifest.verify(&first.dir).unwrap();
    assert_eq!(std::fs::read(root.join("config.json")).unwrap(), cfg.raw);

    let reports = load_reports(&first.dir, &first.manifest).unwrap();
    assert_eq!(reports.len(), 3);
    let fp = first.manifest.split_fingerprint.clone().unwrap();
    for r in &reports {
        assert_eq!(r.split_fingerprint.as_deref(), Some(fp.as_str()), "{}", r.model);
        assert_eq!(r.dataset, DatasetTag::InternalTest);
    }
    let echo = reports.iter().find(|r| r.model == "echo").unwrap();
    assert_eq!(echo.metrics["macro_f1"].point, 1.0);
    let lr = reports.iter().find(|r| r.model == "lr").unwrap();
    assert!(lr.metrics["macro_f1"].point > 0.8, "{}", lr.metrics["macro_f1"].point);

    let trained_at = first.manifest.stage("train:lr").unwrap().finished_at;
    let second = run_experiment(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(second.dir, root);
    assert!(second.manifest.reused);
    assert_eq!(second.manifest.invocations, 2);
    assert!(second.manifest.stages.iter().all(|s| s.status == StageStatus::Reused));
    assert_eq!(second.manifest.stage("train:lr").unwrap().finished_at, trained_at);

    // a fresh subrun of the same config reproduces the classic reports bitwise
    let third = run_experiment(&cfg, &RunOptions { fresh: true, ..Default::default() }).unwrap();
    assert_ne!(third.dir, root);
    assert!(third.dir.starts_with(root.join("subruns")));
    for rel in ["reports/lr.internal_test.json", "reports/rf.internal_test.json", "reports/echo.internal_test.json"] {
        assert_eq!(std::fs::read(root.join(rel)).unwrap(), std::fs::read(third.dir.join(rel)).unwrap(), "{rel}");
    }

    // a changed config never overwrites the existing run
    let mut reseeded = cfg.clone();
    reseeded.set_seed(6);
    let fourth = run_experiment(&reseeded, &RunOptions { until: Until::Split, ..Default::default() }).unwrap();
    assert_ne!(fourth.dir, root);
    assert_eq!(fourth.manifest.status, RunStatus::Partial);
    assert!(fourth.dir.join("config.effective.json").exists());
    RunManifest::load(&root).unwrap().verify(&root).unwrap();

    let events = std::fs::read_to_string(root.join("events.jsonl")).unwrap();
    for line in events.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["event"].is_string());
    }
    assert!(events.contains("stage_reused"));
}

#[test]
fn external_validation_on_a_frozen_encoder_runs_no_training() {
    let tmp = tempfile::tempdir().unwrap();
    let encoder = json!([{"name": "bert", "family": "encoder",
        "finetune": {"encoder_id": "tiny-random:2", "epochs": 2, "batch_size": 16, "learning_rate": 0.003}}]);
    let base = run_experiment(&loaded(config(&tmp.path().join("base"), encoder, json!({}))), &RunOptions::default()).unwrap();
    assert!(base.manifest.stage("train:bert").is_some());

    let frozen = json!([{"name": "bert", "family": "encoder", "frozen": base.dir.join("models/bert"),
        "finetune": {"encoder_id": "tiny-random:2", "epochs": 2}}]);
    let external = json!({"source": "synthetic", "n_cases": 120, "seed": 99, "id_prefix": "ext-"});
    // fresh internal cases, so none were seen in training
    let internal = json!({"source": "synthetic", "n_cases": 100, "seed": 31, "id_prefix": "int-"});
    let cfg = config(&tmp.path().join("ext"), frozen, json!({"external": external, "dataset": internal}));
    let out = run_experiment(&loaded(cfg), &RunOptions::default()).unwrap();
    assert!(out.manifest.stages.iter().all(|s| !s.name.starts_with("train:")));
    let ext = out.manifest.stage(&evaluate_stage("bert", DatasetTag::ExternalTest)).unwrap();
    assert_eq!(ext.status, StageStatus::Completed);
    let r = read_report(&out.dir, "reports/bert.external_test.json");
    assert_eq!(r.dataset, DatasetTag::ExternalTest);
    assert_eq!(r.n_cases, 120);
    assert!(out.dir.join("throughput/bert.external_test.json").exists());
    let tp: Value = serde_json::from_str(&std::fs::read_to_string(out.dir.join("throughput/bert.external_test.json")).unwrap()).unwrap();
    assert!(tp["cases_per_second"].as_f64().unwrap() > 0.0);
}

#[test]
fn evaluating_on_training_cases_is_a_stage_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let models = json!([{"name": "lr", "family": "classic_single",
        "embedding": {"backend": "synthetic_static", "dim": 16, "seed": 1},
        "grids": [{"architecture": "logistic_regression", "grid": {"c": [1.0]}}], "n_folds": 3}]);
    let base = run_experiment(&loaded(config(&tmp.path().join("a"), models, json!({}))), &RunOptions::default()).unwrap();
    let frozen = json!([{"name": "lr", "frozen": base.dir.join("models/lr"), "family": "classic_single",
        "embedding": {"backend": "synthetic_static", "dim": 16, "seed": 1}}]);
    let mut c = config(&tmp.path().join("b"), frozen, json!({}));
    c.split.seed = Some(1234);
    let cfg_path = write_config(tmp.path(), &c);
    let (code, _, err) = run_cli(&["evaluate", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(code, EXIT_STAGE, "{err}");
    let m = RunManifest::load(&tmp.path().join("b")).unwrap();
    assert_eq!(m.status, RunStatus::Failed);
    let s = m.stage("evaluate:lr:internal_test").unwrap();
    assert_eq!(s.status, StageStatus::Failed);
    assert!(s.error.as_deref().unwrap().contains("training data"));
    assert!(m.reports.is_empty());
}

#[test]
fn predict_writes_a_label_csv_inside_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let c = config(&tmp.path().join("run"), classic_models(), json!({}));
    let cfg_path = write_config(tmp.path(), &c);
    let (cases, _) = codtox::data::load_dataset(
        &DatasetConfig::Synthetic { n_cases: 20, seed: 77, id_prefix: "new-".into() },
        &c.schema,
        &c.text,
    )
    .unwrap();
    let input_dir = tmp.path().join("input");
    codtox_core::synth::write_dataset(&input_dir, &cases).unwrap();
    let input = input_dir.join("records.csv");
    let (code, out, err) =
        run_cli(&["predict", "--config", cfg_path.to_str().unwrap(), "--in", input.to_str().unwrap(), "--out", "preds.csv", "--model", "rf"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let v: Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["rows"], 20);
    let text = std::fs::read_to_string(tmp.path().join("run/preds.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header[0], "case_id");
    assert_eq!(header[1..11], c.schema.classes.iter().map(String::as_str).collect::<Vec<_>>()[..]);
    assert!(header[11].starts_with("p_"));
    assert_eq!(header.len(), 21);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 20);
    for (row, case) in rows.iter().zip(&cases) {
        assert_eq!(row[0], case.key());
        assert!(row[1..11].iter().all(|b| *b == "0" || *b == "1"));
        for (j, b) in row[1..11].iter().enumerate() {
            let p: f64 = row[11 + j].parse().unwrap();
            assert!((0.0..=1.0).contains(&p), "{row:?}");
            assert_eq!(*b == "1", p >= 0.5);
        }
    }
    // the prediction file is part of the verified inventory
    let m = RunManifest::load(&tmp.path().join("run")).unwrap();
    assert!(m.artifacts.contains_key("preds.csv"));
    m.verify(&tmp.path().join("run")).unwrap();

    // outputs outside the run directory are refused
    let outside = tmp.path().join("elsewhere.csv");
    let (code, _, _) =
        run_cli(&["predict", "--config", cfg_path.to_str().unwrap(), "--in", input.to_str().unwrap(), "--out", outside.to_str().unwrap()]);
    assert_eq!(code, EXIT_USAGE);
    assert!(!outside.exists());
    // gold_echo cannot label unlabeled input
    let (code, _, _) = run_cli(&[
        "predict", "--config", cfg_path.to_str().unwrap(), "--in", input.to_str().unwrap(), "--out", "p2.csv", "--model", "echo",
    ]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn report_table_matches_the_json_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let c = config(&tmp.path().join("run"), classic_models(), json!({}));
    let cfg_path = write_config(tmp.path(), &c);
    let (code, _, err) = run_cli(&["evaluate", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{err}");
    let run = tmp.path().join("run");
    let (code, table, err) = run_cli(&["report", "--run", run.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{err}");
    let m = RunManifest::load(&run).unwrap();
    let mut lines = table.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), m.reports.len());
    for rel in &m.reports {
        let r = read_report(&run, rel);
        let row = rows.iter().find(|row| row[0] == r.model && row[1] == r.dataset.to_string()).unwrap();
        assert_eq!(row[2].parse::<usize>().unwrap(), r.n_cases);
        assert_eq!(Some(row[3]), r.split_fingerprint.as_deref());
        for (name, ci) in &r.metrics {
            let col = header.iter().position(|h| h == name).unwrap();
            assert_eq!(row[col].parse::<f64>().unwrap(), ci.point, "{name}");
            assert_eq!(row[col + 1].parse::<f64>().unwrap(), ci.low);
            assert_eq!(row[col + 2].parse::<f64>().unwrap(), ci.high);
        }
    }
    assert_eq!(std::fs::read_to_string(run.join("reports/summary.tsv")).unwrap(), table);

    let (code, csv_table, _) = run_cli(&["report", "--run", run.to_str().unwrap(), "--format", "csv", "--precision", "3"]);
    assert_eq!(code, EXIT_OK);
    assert!(csv_table.lines().nth(1).unwrap().contains(" ("));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run_cli(&[]).0, EXIT_USAGE);
    assert_eq!(run_cli(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(run_cli(&["--help"]).0, EXIT_OK);
    assert_eq!(run_cli(&["predict", "--help"]).0, EXIT_OK);
    let (code, _, err) = run_cli(&["predict", "--config", "c.json", "--out", "p.csv"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("--in"), "{err}");
    assert_eq!(run_cli(&["report"]).0, EXIT_USAGE);
    assert_eq!(run_cli(&["ingest", "--config", tmp.path().join("missing.json").to_str().unwrap()]).0, EXIT_USAGE);

    std::fs::write(tmp.path().join("bad.json"), "{\"name\": 1}").unwrap();
    assert_eq!(run_cli(&["ingest", "--config", tmp.path().join("bad.json").to_str().unwrap()]).0, EXIT_USAGE);

    let mut c = config(&tmp.path().join("run"), classic_models(), json!({}));
    c.dataset = DatasetConfig::Files {
        records: tmp.path().join("no-such-records.csv"),
        gold: tmp.path().join("no-such-gold.csv"),
        schema_map: Default::default(),
    };
    let p = write_config(tmp.path(), &c);
    let (code, _, err) = run_cli(&["ingest", "--config", p.to_str().unwrap()]);
    assert_eq!(code, EXIT_DATA, "{err}");

    // explain is encoder-only
    let c = config(&tmp.path().join("run2"), classic_models(), json!({}));
    let p = write_config(tmp.path(), &c);
    assert_eq!(run_cli(&["explain", "--config", p.to_str().unwrap(), "--model", "lr"]).0, EXIT_USAGE);
    // llm-eval with no llm model
    let only_lr = json!([classic_models()[0].clone()]);
    let p = write_config(tmp.path(), &config(&tmp.path().join("run3"), only_lr, json!({})));
    assert_eq!(run_cli(&["llm-eval", "--config", p.to_str().unwrap()]).0, EXIT_USAGE);
}

#[test]
fn a_locked_run_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = loaded(config(&tmp.path().join("run"), classic_models(), json!({})));
    let held = Runner::open(&cfg, false).unwrap();
    let err = run_experiment(&cfg, &RunOptions { until: Until::Ingest, ..Default::default() }).unwrap_err();
    assert!(matches!(err, AppError::Stage { .. }));
    assert_eq!(err.exit_code(), EXIT_STAGE);
    drop(held.finish());
    assert!(run_experiment(&cfg, &RunOptions { until: Until::Ingest, ..Default::default() }).is_ok());
}

#[test]
fn subcommands_advance_one_run_incrementally() {
    let tmp = tempfile::tempdir().unwrap();
    let c = config(&tmp.path().join("run"), classic_models(), json!({}));
    let p = write_config(tmp.path(), &c);
    let p = p.to_str().unwrap();
    let run = tmp.path().join("run");
    assert_eq!(run_cli(&["ingest", "--config", p]).0, EXIT_OK);
    assert!(RunManifest::load(&run).unwrap().stage("split").is_none());
    assert_eq!(run_cli(&["split", "--config", p]).0, EXIT_OK);
    let m = RunManifest::load(&run).unwrap();
    assert_eq!(m.stage("ingest").unwrap().status, StageStatus::Reused);
    assert!(m.split_fingerprint.is_some());
    let (code, out, err) = run_cli(&["llm-eval", "--config", p]);
    assert_eq!(code, EXIT_OK, "{err}");
    let v: Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["status"], "partial");
    let m = RunManifest::load(&run).unwrap();
    assert!(m.stage("train:lr").is_none());
    assert_eq!(m.reports, vec!["reports/echo.internal_test.json".to_string()]);
    let (code, out, _) = run_cli(&["evaluate", "--config", p]);
    assert_eq!(code, EXIT_OK);
    let v: Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["status"], "complete");
    assert_eq!(v["reports"].as_array().unwrap().len(), 3);
    let summary = std::fs::read_to_string(run.join("reports/summary.tsv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
}

#[test]
fn explain_writes_attributions_for_test_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let encoder = json!([{"name": "bert", "family": "encoder",
        "finetune": {"encoder_id": "tiny-random:4", "epochs": 1, "batch_size": 16, "learning_rate": 0.003}}]);
    let c = config(&tmp.path().join("run"), encoder, json!({}));
    let p = write_config(tmp.path(), &c);
    let (code, out, err) = run_cli(&["explain", "--config", p.to_str().unwrap(), "--n", "2", "--format", "text", "--steps", "16"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let v: Value = serde_json::from_str(out.trim()).unwrap();
    assert!(v["report"].as_str().unwrap().ends_with("explanations/bert.txt"));
    let run = tmp.path().join("run");
    let text = std::fs::read_to_string(run.join("explanations/bert.txt")).unwrap();
    assert_eq!(text.matches("# case=").count(), 2);
    let maps: Value = serde_json::from_str(&std::fs::read_to_string(run.join("explanations/bert.json")).unwrap()).unwrap();
    assert_eq!(maps.as_array().unwrap().len(), 2);
    let m = RunManifest::load(&run).unwrap();
    assert!(m.artifacts.contains_key("explanations/bert.txt"));
    // explain trains but does not evaluate
    assert!(m.stage("train:bert").is_some());
    assert!(m.reports.is_empty());
}
