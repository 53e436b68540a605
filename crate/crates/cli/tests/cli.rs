use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fedlatent_cli::{METRICS_FILE, RUN_FILE};

const SMALL: &str = r#"{
  "dataset": {"synthetic": {"classes": 4, "dims": 8, "per_class": 60}},
  "partition": {"dirichlet": {"alpha": 0.5, "min_samples_per_client": 8}},
  "clients": 4,
  "rounds": 200,
  "hidden_layers": [16],
  "batch_size": 16,
  "strategy": {"kind": "fedavg"}
}"#;

fn fedlatent(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedlatent")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn run_small(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let cfg = write_config(dir, SMALL);
    let out = dir.join(out);
    let mut args = vec!["run", "--config", &cfg, "--rounds", "3", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    fedlatent(&args)
}

fn metrics(dir: &Path) -> Vec<csv::StringRecord> {
    let mut reader = csv::Reader::from_path(dir.join(METRICS_FILE)).unwrap();
    reader.records().map(Result::unwrap).collect()
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_small(tmp.path(), "a", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = metrics(&tmp.path().join("a"));
    let last_round: u64 = rows.last().unwrap()[0].parse().unwrap();
    assert_eq!(last_round, 3);

    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("a").join(RUN_FILE)).unwrap()).unwrap();
    assert_eq!(run["config"]["rounds"], 3);
    assert_eq!(run["summary"]["rounds"], 3);
}

#[test]
fn metrics_header_is_stable() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run_small(tmp.path(), "a", &[]).status.success());
    let text = fs::read_to_string(tmp.path().join("a").join(METRICS_FILE)).unwrap();
    assert_eq!(text.lines().next().unwrap(), "round,accuracy,loss,client_id,lambda,nu,u,cos_local_global,duration_ms");
    // Four clients plus one summary row per round.
    assert_eq!(text.lines().count(), 1 + 3 * 5);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run_small(tmp.path(), "a", &[]).status.success());
    assert!(run_small(tmp.path(), "b", &[]).status.success());
    let a = fs::read(tmp.path().join("a").join(METRICS_FILE)).unwrap();
    let b = fs::read(tmp.path().join("b").join(METRICS_FILE)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn normalization_off_leaves_importance_weights_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_small(tmp.path(), "a", &["--normalize", "false"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for row in metrics(&tmp.path().join("a")) {
        assert_eq!(&row[5], &row[6], "nu and u differ in {row:?}");
    }
}

#[test]
fn comparing_a_run_with_itself_gives_zero_deltas() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run_small(tmp.path(), "a", &[]).status.success());
    let a = tmp.path().join("a");
    let report = tmp.path().join("cmp.json");
    let out = fedlatent(&["compare", a.to_str().unwrap(), a.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(c["final_delta"], 0.0);
    assert_eq!(c["best_delta"], 0.0);
    assert!(c["per_round"].as_array().unwrap().iter().all(|r| r["delta"] == 0.0));
}

#[test]
fn compare_without_metrics_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    let out = fedlatent(&["compare", missing.to_str().unwrap(), missing.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(METRICS_FILE));
}

#[test]
fn invalid_config_names_the_key_and_writes_no_run_record() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out_dir = tmp.path().join("bad");
    let out = fedlatent(&["run", "--config", &cfg, "--temperature", "0", "--out", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("temperature"));
    assert!(!out_dir.join(RUN_FILE).exists());
}

#[test]
fn failed_run_removes_a_stale_run_record() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run_small(tmp.path(), "a", &[]).status.success());
    let dir = tmp.path().join("a");
    assert!(dir.join(RUN_FILE).exists());
    // 4 clients cannot each get 500 samples out of 192.
    let cfg =
        write_config(tmp.path(), &SMALL.replace(r#""min_samples_per_client": 8"#, r#""min_samples_per_client": 500"#));
    let out = fedlatent(&["run", "--config", &cfg, "--out", dir.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(!dir.join(RUN_FILE).exists());
}

#[test]
fn run_without_config_requires_a_strategy() {
    let out = fedlatent(&["run", "--rounds", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--strategy"));
}
