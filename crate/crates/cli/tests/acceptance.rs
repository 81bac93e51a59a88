//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Seeds are fixed constants.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use calibkit_core::classical::{fit_isotonic, fit_platt, fit_temperature, temperature_nll};
use calibkit_core::features::{delta_scores, shannon_entropy, FeatureConfig};
use calibkit_core::gbm::{best_root_split, feature_importance, fit_gbm, split_gain};
use calibkit_core::features::FeatureMatrix;
use calibkit_core::math::{sigmoid, softmax};
use calibkit_core::metrics::{ace, bin_reliability, evaluate, mce, roc_auc};
use calibkit_core::model::{
    fit_calibrator, identity_probs, predict, CalibrationData, FitOptions, Method, ScoreTarget,
};
use calibkit_core::split::{split_indices, SplitPart, DEFAULT_FIT_FRACTION};
use calibkit_core::synth::{gen_flow_signal, gen_miscalibrated, FlowSignalConfig, MiscalibratedConfig};
use calibkit_core::{CalibratorModel, FeatureSet, GbmConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s < limit_s, format!("{s:.2}s (limit {limit_s}s)"))
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut c, mut t, mut p, mut n) = (0u64, 0u64, 0u64, 0u64);
    for (i, &yi) in labels.iter().enumerate() {
        if yi {
            p += 1;
        } else {
            n += 1;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yi && !yj {
                if scores[i] > scores[j] {
                    c += 1;
                } else if scores[i] == scores[j] {
                    t += 1;
                }
            }
        }
    }
    (c as f64 + 0.5 * t as f64) / (p * n) as f64
}

fn auc_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=200);
        let levels = rng.gen_range(2..=25);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..levels)) / 7.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        labels[0] = true;
        labels[1] = false;
        if roc_auc(&scores, &labels).unwrap().auc != pairwise_auc(&scores, &labels) {
            mismatches += 1;
        }
    }
    let (fast, time) = within(start.elapsed(), 5.0);
    outcome(mismatches == 0 && fast, format!("100 tied instances, {mismatches} inexact, {time}"))
}

/// Minimum-SSE non-decreasing step fit by enumerating every partition of the
/// sorted tie groups into consecutive blocks.
fn exhaustive_isotonic(scores: &[f64], labels: &[bool]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &i in &order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    let y = |i: usize| f64::from(u8::from(labels[i]));
    let g = groups.len();
    let mut best = (f64::INFINITY, vec![0.0; scores.len()]);
    for mask in 0u32..(1 << (g - 1)) {
        let mut blocks: Vec<Vec<usize>> = vec![groups[0].clone()];
        for (j, group) in groups.iter().enumerate().skip(1) {
            if mask & (1 << (j - 1)) != 0 {
                blocks.push(group.clone());
            } else {
                blocks.last_mut().unwrap().extend(group);
            }
        }
        let means: Vec<f64> = blocks
            .iter()
            .map(|b| b.iter().map(|&i| y(i)).sum::<f64>() / b.len() as f64)
            .collect();
        if means.windows(2).any(|w| w[0] > w[1]) {
            continue;
        }
        let mut fitted = vec![0.0; scores.len()];
        let mut sse = 0.0;
        for (b, m) in blocks.iter().zip(&means) {
            for &i in b {
                fitted[i] = *m;
                sse += (y(i) - m).powi(2);
            }
        }
        if sse < best.0 - 1e-15 {
            best = (sse, fitted);
        }
    }
    best.1
}

fn isotonic_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=8);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..6)) / 5.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let model = fit_isotonic(&scores, &labels).unwrap();
        let oracle = exhaustive_isotonic(&scores, &labels);
        for (s, o) in scores.iter().zip(&oracle) {
            worst = worst.max((model.apply(*s) - o).abs());
        }
    }
    outcome(worst <= 1e-3, format!("100 instances n<=8, max |diff| {worst:.2e} (tol 1e-3)"))
}

fn temperature_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0f64;
    let mut edge = 0;
    let (lo, hi, step): (f64, f64, f64) = (0.05, 20.0, 1e-4);
    for _ in 0..20 {
        let n = rng.gen_range(20..=40);
        let t_true: f64 = rng.gen_range(0.5..3.0);
        let mut logits = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let p = softmax(&z.iter().map(|v| v / t_true).collect::<Vec<_>>());
            let u: f64 = rng.gen();
            let y = if u < p[0] {
                0
            } else if u < p[0] + p[1] {
                1
            } else {
                2
            };
            logits.push(z);
            labels.push(y);
        }
        let fitted = fit_temperature(&logits, &labels).unwrap().t;
        let steps = ((hi - lo) / step).round() as usize;
        let (mut best_t, mut best_v) = (lo, f64::INFINITY);
        for i in 0..=steps {
            let t = lo + i as f64 * step;
            let v = temperature_nll(&logits, &labels, t);
            if v < best_v {
                best_v = v;
                best_t = t;
            }
        }
        if best_t <= lo || best_t >= hi {
            edge += 1;
        }
        worst = worst.max((fitted - best_t).abs());
    }
    outcome(
        worst <= 1e-3 && edge == 0,
        format!("20 datasets, max |T - T_grid| {worst:.2e} (tol 1e-3), {edge} grid-edge minima"),
    )
}

fn gain_fixtures() -> Outcome {
    let cfg = GbmConfig {
        min_child_weight: 0.0,
        ..Default::default()
    };
    let m = |rows: &[[f64; 2]]| {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        FeatureMatrix::from_rows(vec!["f0".into(), "f1".into()], &rows).unwrap()
    };
    // (matrix, labels, feature, threshold, hand-evaluated gain)
    let fixtures = [
        (m(&[[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]]), [false, false, true, true], 0, 2.5, 2.0 / 3.0),
        (m(&[[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]]), [false, true, true, true], 0, 1.5, 198.0 / 475.0),
        (m(&[[1.0, 5.0], [1.0, 6.0], [2.0, 7.0], [2.0, 8.0]]), [true, false, true, false], 1, 5.5, 6.0 / 35.0),
        (m(&[[0.0, 3.0], [0.0, 1.0], [1.0, 2.0], [1.0, 4.0]]), [true, false, false, true], 1, 2.5, 2.0 / 3.0),
    ];
    let mut worst = 0.0f64;
    let mut wrong_split = 0;
    for (x, y, feature, threshold, hand) in &fixtures {
        let s = best_root_split(x, y, &cfg).unwrap().expect("fixture has a split");
        if s.feature_index != *feature || s.threshold != *threshold {
            wrong_split += 1;
        }
        worst = worst.max((s.gain - hand).abs());
    }
    // Formula cross-check on raw sums.
    worst = worst.max((split_gain(1.0, 0.5, -1.0, 0.5, 1.0, 0.0) - 2.0 / 3.0).abs());
    outcome(
        worst <= 1e-12 && wrong_split == 0,
        format!("{} fixtures, max |gain - hand| {worst:.2e} (tol 1e-12), {wrong_split} wrong splits", fixtures.len()),
    )
}

fn temperature_recovery() -> Outcome {
    let start = Instant::now();
    let records = gen_miscalibrated(&MiscalibratedConfig {
        n: 50_000,
        sharpen: 2.67,
        seed: 267,
        ..Default::default()
    })
    .unwrap();
    let data = CalibrationData::Records(records);
    let keys = data.split_keys();
    let fit = data.select(&split_indices(&keys, 0, SplitPart::Fit, DEFAULT_FIT_FRACTION));
    let held = data.select(&split_indices(&keys, 0, SplitPart::Eval, DEFAULT_FIT_FRACTION));
    let target = ScoreTarget::Rank(1);
    let outcome_fit = fit_calibrator(Method::Temperature, &fit, target, &FitOptions::default()).unwrap();
    let CalibratorModel::Temperature(m) = &outcome_fit.model else {
        unreachable!()
    };
    let (raw, labels) = identity_probs(&held, target).unwrap();
    let cal = predict(&outcome_fit.model, &held, target, &FeatureConfig::default()).unwrap();
    let before = evaluate(&raw, &labels, 10).unwrap().report;
    let after = evaluate(&cal, &labels, 10).unwrap().report;
    let t_ok = (2.62..=2.72).contains(&m.t);
    let ratio = after.ace / before.ace;
    let dauc = (after.auc - before.auc).abs();
    let (fast, time) = within(start.elapsed(), 30.0);
    outcome(
        t_ok && ratio <= 0.4 && dauc <= 1e-12 && fast,
        format!(
            "T = {:.4} [{}], ACE {:.4} -> {:.4} ratio {ratio:.3} [{}], |dAUC| {dauc:.2e} [{}], {time}",
            m.t,
            if t_ok { "ok" } else { "out of [2.62, 2.72]" },
            before.ace,
            after.ace,
            if ratio <= 0.4 { "ok" } else { "above 0.40" },
            if dauc <= 1e-12 { "ok" } else { "above 1e-12" },
        ),
    )
}

fn platt_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let n = 50_000;
    let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let y: Vec<bool> = z.iter().map(|&v| rng.gen::<f64>() < sigmoid(2.0 * v + 1.0)).collect();
    let fit = fit_platt(&z, &y).unwrap();
    let (a, b) = (fit.model.a, fit.model.b);
    outcome(
        (a - 2.0).abs() <= 0.1 && (b - 1.0).abs() <= 0.1,
        format!("a = {a:.4}, b = {b:.4} (target 2, 1 +/- 0.1)"),
    )
}

struct ArmResult {
    auc: f64,
    ace: f64,
    top5: Vec<String>,
    nll_monotone: bool,
}

fn flow_signal_arms() -> (ArmResult, ArmResult, Duration) {
    let start = Instant::now();
    let records = gen_flow_signal(&FlowSignalConfig {
        n: 20_000,
        num_layers: 12,
        num_heads: 4,
        signal_strength: 0.7,
        seed: 42,
        ..Default::default()
    })
    .unwrap();
    let data = CalibrationData::Records(records);
    let keys = data.split_keys();
    let fit = data.select(&split_indices(&keys, 42, SplitPart::Fit, DEFAULT_FIT_FRACTION));
    let held = data.select(&split_indices(&keys, 42, SplitPart::Eval, DEFAULT_FIT_FRACTION));
    let arm = |set: FeatureSet| {
        let features = FeatureConfig {
            feature_set: set,
            ..Default::default()
        };
        let x = fit.feature_matrix(&features).unwrap();
        let result = fit_gbm(&x, &fit.labels(), &GbmConfig::default()).unwrap();
        let nll_monotone = result.train_nll.windows(2).all(|w| w[1] <= w[0]);
        let top5 = feature_importance(&result.model)
            .into_iter()
            .take(5)
            .map(|(name, _)| name)
            .collect();
        let model = CalibratorModel::Gbm(result.model);
        let probs = predict(&model, &held, ScoreTarget::TopK, &features).unwrap();
        let report = evaluate(&probs, &held.labels(), 10).unwrap().report;
        ArmResult {
            auc: report.auc,
            ace: report.ace,
            top5,
            nll_monotone,
        }
    };
    let full = arm(FeatureSet::Full);
    let base = arm(FeatureSet::Base);
    (full, base, start.elapsed())
}

fn table_analogue(full: &ArmResult, base: &ArmResult, elapsed: Duration) -> Outcome {
    let gain = full.auc - base.auc;
    let entropy_in_top5 = full.top5.iter().any(|n| n.contains("_flow_entropy"));
    let (fast, time) = within(elapsed, 120.0);
    let ace_lower = full.ace < base.ace;
    outcome(
        gain >= 0.03 && ace_lower && entropy_in_top5 && fast,
        format!(
            "AUC full {:.4} vs base {:.4} (+{gain:.4}, need +0.03) [{}], ACE full {:.4} vs base {:.4} [{}], top-5 {:?} [{}], {time}",
            full.auc,
            base.auc,
            if gain >= 0.03 { "ok" } else { "short" },
            full.ace,
            base.ace,
            if ace_lower { "ok" } else { "not lower" },
            full.top5,
            if entropy_in_top5 { "ok" } else { "no flow entropy" },
        ),
    )
}

fn nll_monotone(full: &ArmResult, base: &ArmResult) -> Outcome {
    outcome(
        full.nll_monotone && base.nll_monotone,
        format!(
            "full arm {}, base arm {} (also asserted inside every boosting round)",
            full.nll_monotone, base.nll_monotone
        ),
    )
}

fn metric_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut failures = BTreeMap::new();
    let mut fail = |name: &'static str| *failures.entry(name).or_insert(0) += 1;
    for _ in 0..1000 {
        let n = rng.gen_range(1..300);
        let m = rng.gen_range(1..25);
        let p: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let y: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let b = bin_reliability(&p, &y, m).unwrap();
        if ace(&b) > mce(&b).unwrap() + 1e-12 {
            fail("ace<=mce");
        }
        let one = bin_reliability(&p, &y, 1).unwrap();
        let gap = (y.iter().filter(|&&v| v).count() as f64 / n as f64 - p.iter().sum::<f64>() / n as f64).abs();
        if (ace(&one) - gap).abs() > 1e-12 {
            fail("m1-ace");
        }
        let len = rng.gen_range(1..30);
        let w: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
        if w.iter().sum::<f64>() > 0.0 {
            let h = shannon_entropy(&w).unwrap();
            if !(0.0..=(len as f64).ln() + 1e-12).contains(&h) {
                fail("entropy-bounds");
            }
        }
        if (shannon_entropy(&vec![0.3; len]).unwrap() - (len as f64).ln()).abs() > 1e-12 {
            fail("entropy-uniform");
        }
        let mut onehot = vec![0.0; len];
        onehot[rng.gen_range(0..len)] = 0.7;
        if shannon_entropy(&onehot).unwrap() != 0.0 {
            fail("entropy-onehot");
        }
        if len >= 2 {
            let d = delta_scores(&w).unwrap();
            if (d.iter().sum::<f64>() - (w[len - 1] - w[0])).abs() > 1e-12 {
                fail("telescoping");
            }
        }
    }
    let (fast, time) = within(start.elapsed(), 10.0);
    outcome(
        failures.is_empty() && fast,
        format!("1000 random cases each, violations {failures:?}, {time}"),
    )
}

fn calibkit(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_calibkit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn calibkit");
    assert!(
        out.status.success(),
        "calibkit {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        files.insert(path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap());
    }
    files
}

fn cli_pipeline(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let steps: &[&[&str]] = &[
        &["synth", "--n", "3000", "--sharpen", "2.67", "--seed", "5", "--out", "mis.jsonl"],
        &["synth", "--kind", "flow-signal", "--n", "1500", "--seed", "6", "--out", "flow.jsonl"],
        &["extract", "--input", "flow.jsonl", "--out", "flow.csv"],
        &["extract", "--input", "flow.jsonl", "--head-mode", "head:2", "--feature-set", "base", "--out", "flow_base.csv"],
        &["fit", "--input", "mis.jsonl", "--method", "platt", "--split-seed", "3", "--out", "platt.json"],
        &["fit", "--input", "mis.jsonl", "--method", "temperature", "--target", "rank:1", "--out", "temp.json"],
        &["fit", "--input", "mis.jsonl", "--method", "isotonic", "--target", "rank:2", "--out", "iso.json"],
        &["fit", "--input", "flow.csv", "--method", "gbm", "--rounds", "20", "--subsample", "0.8", "--colsample", "0.7", "--seed", "9", "--out", "gbm.json"],
        &["eval", "--input", "mis.jsonl", "--model", "temp.json", "--target", "rank:1", "--report", "temp_report.json", "--reliability", "temp_rel.csv", "--roc", "temp_roc.csv"],
        &["eval", "--input", "flow.jsonl", "--model", "gbm.json", "--bins", "15", "--report", "gbm_report.json", "--reliability", "gbm_rel.csv", "--roc", "gbm_roc.csv"],
        &["eval", "--input", "mis.jsonl", "--model", "identity", "--split", "all", "--report", "id_report.json"],
        &["importance", "--model", "gbm.json", "--out", "importance.csv"],
    ];
    let mut stdout = BTreeMap::new();
    for (i, args) in steps.iter().enumerate() {
        stdout.insert(format!("stdout/{i:02}-{}", args[0]), calibkit(dir, args));
    }
    let mut all = snapshot(dir);
    all.extend(stdout);
    all
}

fn cli_determinism() -> Outcome {
    let a = tempfile::TempDir::new().unwrap();
    let b = tempfile::TempDir::new().unwrap();
    let first = cli_pipeline(a.path());
    let second = cli_pipeline(b.path());
    let differing: Vec<&String> = first
        .iter()
        .filter(|(k, v)| second.get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    outcome(
        differing.is_empty() && first.len() == second.len(),
        format!(
            "12 commands (synth, extract, fit x4, eval x3, importance), {} outputs compared, differing: {differing:?}",
            first.len()
        ),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("oracle: roc_auc == pairwise oracle", auc_oracle()),
        ("oracle: fit_isotonic == exhaustive monotone fit", isotonic_oracle()),
        ("oracle: fit_temperature == 1e-4 grid search", temperature_oracle()),
        ("oracle: gbm split gain == hand-computed gain", gain_fixtures()),
        ("recovery: temperature on synth(T0=2.67, n=50000)", temperature_recovery()),
        ("recovery: platt (a, b) at n=50000", platt_recovery()),
    ];
    let (full, base, elapsed) = flow_signal_arms();
    results.push(("analogue: full vs base gbm on flow signal", table_analogue(&full, &base, elapsed)));
    results.push(("analogue: gbm training NLL non-increasing", nll_monotone(&full, &base)));
    results.push(("identities: metric and feature properties", metric_identities()));
    results.push(("determinism: cli re-runs byte-identical", cli_determinism()));

    println!();
    for (name, o) in &results {
        println!("{}  {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("\nacceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
