use std::path::Path;
use std::process::{Command, Output};

use cfhrl::harness::read_records;

fn cfhrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfhrl")).args(args).output().unwrap()
}

fn quick() -> Vec<&'static str> {
    vec![
        "--seeds",
        "1",
        "--episodes",
        "8",
        "--set",
        "n_trajectories=200",
        "--set",
        "value.n_updates=3000",
        "--set",
        "planner.n_tuples=3000",
    ]
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_data_output_feeds_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.txt");
    let out = cfhrl(&[&["gen-data"], &quick()[..], &["--out", p(&data)]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let set = format!("data_path={}", p(&data));
    let ck = dir.path().join("ck");
    let out = cfhrl(&[&["train"], &quick()[..], &["--set", &set, "--out", p(&ck)]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ck.join("seed_0").join("planner.txt").exists());
    assert!(ck.join("config.txt").exists());
}

#[test]
fn missing_dataset_is_an_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = cfhrl(&["train", "--set", "data_path=/no/such/file.txt", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/file.txt"));
}

#[test]
fn unknown_config_key_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    std::fs::write(&cfg, "version = 1\nmaze = small\nvalue.tua = 0.9\n").unwrap();
    let out = cfhrl(&["train", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("value.tua"));
}

#[test]
fn ablate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("m.jsonl");
    let out = cfhrl(&[&["ablate"], &quick()[..], &["--variants", "full,flat,fixed_k1", "--out", p(&metrics)]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let recs = read_records(&metrics).unwrap();
    assert_eq!(recs.iter().map(|r| r.variant.as_str()).collect::<Vec<_>>(), ["full", "flat", "fixed_k1"]);

    let rep = dir.path().join("rep");
    let out = cfhrl(&["report", "--metrics", p(&metrics), "--out-dir", p(&rep)]);
    assert!(out.status.success());
    let table = std::fs::read_to_string(rep.join("table.txt")).unwrap();
    assert!(table.starts_with("variant"));
    assert_eq!(std::fs::read_to_string(rep.join("records.tsv")).unwrap().lines().count(), 4);
    assert_eq!(std::fs::read_to_string(rep.join("summary.csv")).unwrap().lines().count(), 4);
}

#[test]
fn eval_writes_trace_log() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    assert!(cfhrl(&[&["train"], &quick()[..], &["--out", p(&ck)]].concat()).status.success());
    let traces = dir.path().join("t.jsonl");
    let metrics = dir.path().join("m.jsonl");
    let out = cfhrl(
        &[&["eval"], &quick()[..], &["--checkpoints", p(&ck), "--out", p(&metrics), "--traces", p(&traces)]].concat(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(&traces).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["d_values"].is_array() && v["stopping_level"].is_u64());
    }
    assert!(!log.is_empty());
}

#[test]
fn analyze_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.jsonl");
    let out = cfhrl(&["analyze", "--out", p(&path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 4);
}
