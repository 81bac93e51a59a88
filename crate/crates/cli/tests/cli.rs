use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_calibkit"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn calibkit")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "calibkit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn synth(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["synth", "--out", name];
    args.extend_from_slice(extra);
    ok(dir, &args);
    dir.join(name)
}

#[test]
fn help_and_usage_errors() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 64);
    assert_eq!(code(&run(dir.path(), &["fit", "--input", "x.jsonl", "--method", "bogus", "--out", "m.json"])), 64);
    assert_eq!(code(&run(dir.path(), &["eval", "--model", "identity", "--input", "x", "--target", "rank:0"])), 64);
}

#[test]
fn extract_writes_one_row_per_record() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    synth(p, "r.jsonl", &["--n", "50", "--seed", "3"]);
    ok(p, &["extract", "--input", "r.jsonl", "--out", "f.csv"]);
    let csv = fs::read_to_string(p.join("f.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
    assert!(csv.starts_with("query_len,top1_answer_len"));
    ok(p, &["extract", "--input", "r.jsonl", "--out", "g.csv"]);
    assert_eq!(fs::read(p.join("f.csv")).unwrap(), fs::read(p.join("g.csv")).unwrap());
}

#[test]
fn extract_reports_malformed_line() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let good = synth(p, "r.jsonl", &["--n", "3"]);
    let mut text = fs::read_to_string(good).unwrap();
    text.push_str("{not json\n");
    fs::write(p.join("bad.jsonl"), text).unwrap();
    let out = run(p, &["extract", "--input", "bad.jsonl", "--out", "f.csv"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"));
    assert!(!p.join("f.csv").exists());
}

#[test]
fn fit_temperature_recovers_sharpening() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    synth(p, "r.jsonl", &["--n", "50000", "--sharpen", "2.67", "--seed", "11"]);
    let out = ok(p, &["fit", "--input", "r.jsonl", "--method", "temperature", "--out", "t.json"]);
    let summary = json(&out);
    assert_eq!(summary["method"], "temperature");
    assert!(summary["nll_after"].as_f64().unwrap() < summary["nll_before"].as_f64().unwrap());
    let model: Value = serde_json::from_str(&fs::read_to_string(p.join("t.json")).unwrap()).unwrap();
    assert_eq!(model["type"], "temperature");
    let t = model["t"].as_f64().unwrap();
    assert!((2.62..=2.72).contains(&t), "t = {t}");
}

#[test]
fn zero_round_gbm_is_base_rate_model() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    synth(p, "r.jsonl", &["--n", "400", "--seed", "2"]);
    ok(p, &["fit", "--input", "r.jsonl", "--method", "gbm", "--rounds", "0", "--split", "all", "--out", "g.json"]);
    let model: Value = serde_json::from_str(&fs::read_to_string(p.join("g.json")).unwrap()).unwrap();
    assert_eq!(model["type"], "gbm");
    assert!(model["trees"].as_array().unwrap().is_empty());
    let text = fs::read_to_string(p.join("r.jsonl")).unwrap();
    let labels: Vec<f64> = text
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["label"].as_f64().unwrap())
        .collect();
    let rate = labels.iter().sum::<f64>() / labels.len() as f64;
    let base = model["base_score_logit"].as_f64().unwrap();
    assert!((base - (rate / (1.0 - rate)).ln()).abs() < 1e-12);
    ok(p, &["importance", "--model", "g.json", "--out", "imp.csv"]);
    assert_eq!(fs::read_to_string(p.join("imp.csv")).unwrap(), "feature,score\n");
}

#[test]
fn single_class_data_is_degenerate() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let good = synth(p, "r.jsonl", &["--n", "20"]);
    // Mark every candidate incorrect.
    let text = fs::read_to_string(good)
        .unwrap()
        .replace("\"is_correct\":true", "\"is_correct\":false")
        .replace("\"label\":1", "\"label\":0");
    fs::write(p.join("neg.jsonl"), text).unwrap();
    let out = run(p, &["fit", "--input", "neg.jsonl", "--method", "platt", "--split", "all", "--out", "m.json"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_identity_on_calibrated_synth() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    synth(p, "r.jsonl", &["--n", "100000", "--seed", "4"]);
    let out = ok(
        p,
        &["eval", "--input", "r.jsonl", "--model", "identity", "--target", "rank:1", "--split", "all", "--report", "rep.json"],
    );
    let report = json(&out);
    let mut keys: Vec<&str> = report.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["ace", "auc", "brier", "m_bins", "mce", "n", "nll"]);
    assert!(report["ace"].as_f64().unwrap() <= 0.02, "{report}");
    assert_eq!(report["n"], 100_000);
    let saved: Value = serde_json::from_str(&fs::read_to_string(p.join("rep.json")).unwrap()).unwrap();
    assert_eq!(saved, report);
}

fn eval_report(p: &Path, model: &str, target: &str, k: &str) -> Value {
    json(&ok(
        p,
        &["eval", "--input", "r.jsonl", "--model", model, "--target", target, "--k", k, "--reliability", "rel.csv", "--roc", "roc.csv"],
    ))
}

#[test]
fn temperature_beats_identity_on_sharpened_scores() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    synth(p, "r.jsonl", &["--n", "50000", "--sharpen", "2.67", "--seed", "5"]);
    ok(p, &["fit", "--input", "r.jsonl", "--method", "temperature", "--out", "t.json"]);
    let raw = eval_report(p, "identity", "rank:1", "3");
    let cal = eval_report(p, "t.json", "rank:1", "3");
    let (a0, a1) = (raw["ace"].as_f64().unwrap(), cal["ace"].as_f64().unwrap());
    assert!(a1 <= 0.5 * a0, "ace {a0} -> {a1}");
    let rel = fs::read_to_string(p.join("rel.csv")).unwrap();
    assert_eq!(rel.lines().next(), Some("bin_lo,bin_hi,count,conf,acc"));
    assert_eq!(rel.lines().count(), 11);
    let roc = fs::read_to_string(p.join("roc.csv")).unwrap();
    assert_eq!(roc.lines().nth(1), Some("inf,0,0"));
    assert!(roc.trim_end().ends_with(",1,1"));
}

#[test]
fn temperature_keeps_auc_with_one_candidate() {
    // With a single candidate plus the residual class the scaled score is a
    // monotone function of the raw score.
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    synth(p, "r.jsonl", &["--n", "50000", "--k", "1", "--sharpen", "2.67", "--seed", "6"]);
    ok(p, &["fit", "--input", "r.jsonl", "--k", "1", "--method", "temperature", "--out", "t.json"]);
    let raw = eval_report(p, "identity", "rank:1", "1");
    let cal = eval_report(p, "t.json", "rank:1", "1");
    let (u0, u1) = (raw["auc"].as_f64().unwrap(), cal["auc"].as_f64().unwrap());
    assert!((u0 - u1).abs() <= 1e-12, "auc {u0} vs {u1}");
    assert!(cal["ace"].as_f64().unwrap() <= 0.5 * raw["ace"].as_f64().unwrap());
}

#[test]
fn incompatible_models_exit_4() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    synth(p, "r.jsonl", &["--kind", "flow-signal", "--n", "600", "--seed", "8"]);
    ok(p, &["extract", "--input", "r.jsonl", "--feature-set", "base", "--out", "base.csv"]);
    ok(p, &["fit", "--input", "r.jsonl", "--method", "gbm", "--rounds", "5", "--out", "g.json"]);
    // Model wants flow-entropy columns the base table lacks.
    let out = run(p, &["eval", "--input", "base.csv", "--model", "g.json", "--split", "all"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(p, &["eval", "--input", "r.jsonl", "--model", "g.json", "--target", "rank:1"]);
    assert_eq!(code(&out), 4);
    ok(p, &["fit", "--input", "r.jsonl", "--method", "platt", "--out", "p.json"]);
    assert_eq!(code(&run(p, &["importance", "--model", "p.json", "--out", "imp.csv"])), 4);
    // Same gbm on its own feature table is fine.
    ok(p, &["extract", "--input", "r.jsonl", "--out", "full.csv"]);
    ok(p, &["eval", "--input", "full.csv", "--model", "g.json", "--split", "all"]);
}

#[test]
fn importance_is_sorted_by_split_count() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    synth(p, "r.jsonl", &["--kind", "flow-signal", "--n", "1000", "--seed", "9"]);
    ok(p, &["fit", "--input", "r.jsonl", "--method", "gbm", "--rounds", "20", "--out", "g.json"]);
    ok(p, &["importance", "--model", "g.json", "--out", "imp.csv"]);
    let text = fs::read_to_string(p.join("imp.csv")).unwrap();
    let counts: Vec<u64> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(!counts.is_empty());
    assert!(counts.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn classical_methods_round_trip_through_eval() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    synth(p, "r.jsonl", &["--n", "3000", "--sharpen", "2.0", "--seed", "10"]);
    for method in ["platt", "isotonic", "temperature"] {
        let model = format!("{method}.json");
        let fit = json(&ok(p, &["fit", "--input", "r.jsonl", "--method", method, "--out", &model]));
        assert!(fit["nll_after"].as_f64().unwrap() <= fit["nll_before"].as_f64().unwrap());
        let report = json(&ok(p, &["eval", "--input", "r.jsonl", "--model", &model]));
        assert!(report["ace"].as_f64().unwrap() < 0.1, "{method}: {report}");
    }
}

#[test]
fn thread_cap_does_not_change_output() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    ok(p, &["synth", "--kind", "flow-signal", "--n", "300", "--out", "a.jsonl"]);
    let out = bin()
        .current_dir(p)
        .env("CALIBKIT_THREADS", "1")
        .args(["synth", "--kind", "flow-signal", "--n", "300", "--out", "b.jsonl"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(p.join("a.jsonl")).unwrap(), fs::read(p.join("b.jsonl")).unwrap());
    let bad = bin()
        .current_dir(p)
        .env("CALIBKIT_THREADS", "zero")
        .args(["synth", "--out", "c.jsonl"])
        .output()
        .unwrap();
    assert_eq!(code(&bad), 64);
}
