use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "grid": {"regular": {"start": 0.0, "step": 1.0, "count": 6}},
  "strata": {"equal_contiguous": 3},
  "budget": 30,
  "reference": "average_of_nominals",
  "models": [
    {"nominal": {"pmf": [0.3, 0.25, 0.2, 0.12, 0.08, 0.05]}, "set": {"type": "l2", "gamma": 0.1}},
    {"nominal": {"pmf": [0.1, 0.15, 0.2, 0.2, 0.2, 0.15]}, "set": {"type": "wasserstein1"}}
  ],
  "simulator": {"kind": "table", "means": [0.02, 0.05, 0.1, 0.2, 0.4, 0.7]},
  "bo": {"n_iterations": 8},
  "seed": 5
}"#;

fn drstrat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drstrat")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn solve_writes_a_consistent_allocation() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.json", SMALL);
    let out = tmp.path().join("solve");
    let run = drstrat(&["solve", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let counts: Vec<u64> = csv_rows(&out.join("allocation.csv")).iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(counts.len(), 3);
    assert_eq!(counts.iter().sum::<u64>(), 30);
    let report: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    let best: Vec<u64> = serde_json::from_value(report["best_allocation"].clone()).unwrap();
    assert_eq!(best, counts);
    for name in ["trace.csv", "manifest.json", "witness_model_0.csv", "witness_model_1.csv"] {
        assert!(out.join(name).exists(), "missing {name}");
    }
}

#[test]
fn evaluate_and_replicate_accept_a_solved_report() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.json", SMALL);
    let solved = tmp.path().join("solve");
    assert!(drstrat(&["solve", "--config", &config, "--out", solved.to_str().unwrap()]).status.success());
    let report = solved.join("report.json");

    let eval = tmp.path().join("eval");
    let run = drstrat(&[
        "evaluate",
        "--config",
        &config,
        "--allocation",
        report.to_str().unwrap(),
        "--out",
        eval.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let rows = csv_rows(&eval.join("evaluation.csv"));
    assert_eq!(rows.len(), 3, "two models plus the max row");
    for row in &rows[..2] {
        let nominal: f64 = row[1].parse().unwrap();
        let worst: f64 = row[2].parse().unwrap();
        assert!(worst >= nominal * (1.0 - 1e-12));
    }

    let rep = tmp.path().join("rep");
    let run = drstrat(&[
        "replicate",
        "--config",
        &config,
        "--allocation",
        solved.join("allocation.csv").to_str().unwrap(),
        "--replications",
        "2000",
        "--out",
        rep.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(csv_rows(&rep.join("replication.csv")).len(), 4);
}

#[test]
fn compare_reports_a_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.json", SMALL);
    let out = tmp.path().join("cmp");
    let run = drstrat(&["compare", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let summary: Value = serde_json::from_slice(&fs::read(out.join("compare.json")).unwrap()).unwrap();
    assert!(summary["ratio"].as_f64().unwrap() >= 1.0 - 1e-9);
    assert!(out.join("allocation_bars.csv").exists());
}

#[test]
fn malformed_config_exits_2_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "bad.json", "{\n  \"preset\": \"toy\",\n  \"budget\": 100,,\n}");
    let out = tmp.path().join("never");
    let run = drstrat(&["solve", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&run.stderr);
    assert!(stderr.contains("bad.json:3"), "{stderr}");
    assert!(!out.exists());
}

#[test]
fn single_replication_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.json", SMALL);
    let alloc = write_config(tmp.path(), "alloc.json", "[10, 10, 10]");
    let out = tmp.path().join("never");
    let run = drstrat(&[
        "replicate",
        "--config",
        &config,
        "--allocation",
        &alloc,
        "--replications",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(run.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn allocation_with_wrong_total_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.json", SMALL);
    let alloc = write_config(tmp.path(), "alloc.json", "[10, 10, 11]");
    let run = drstrat(&[
        "evaluate",
        "--config",
        &config,
        "--allocation",
        &alloc,
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        let source = fs::read_to_string(&path).unwrap();
        drstrat_cli::config::load(&source, None).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 3);
}
