use std::path::Path;
use std::process::{Command, Output};

use m2po_core::datamodel::read_pools;
use serde_json::Value;

fn m2po(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m2po"))
        .current_dir(dir)
        .env_remove("M2PO_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = m2po(dir, args);
    assert!(
        out.status.success(),
        "m2po {args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Generate and score a small training and held-out pair of corpora.
fn prepared(dir: &Path, n: &str) {
    ok(dir, &["gen", "--out", "train.jsonl", "--n-sources", n]);
    ok(dir, &["gen", "--out", "held.jsonl", "--n-sources", "30", "--id-prefix", "h", "--exclude", "train.jsonl"]);
    ok(dir, &["score", "--corpus", "train.jsonl", "--out", "train.scored.jsonl"]);
    ok(dir, &["score", "--corpus", "held.jsonl", "--out", "held.scored.jsonl"]);
}

#[test]
fn gen_counts() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["gen", "--out", "c.jsonl", "--n-sources", "10", "--k", "16"]);
    assert!(stdout.contains("10 pools, 160 candidates"), "{stdout}");
    let text = std::fs::read_to_string(dir.path().join("c.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 10);
    let pools = read_pools(&dir.path().join("c.jsonl")).unwrap();
    assert_eq!(pools.iter().map(|p| p.k()).sum::<usize>(), 160);
}

#[test]
fn gen_is_deterministic_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--out", "a.jsonl", "--n-sources", "20"]);
    ok(d, &["gen", "--out", "b.jsonl", "--n-sources", "20"]);
    ok(d, &["--seed", "8", "gen", "--out", "c.jsonl", "--n-sources", "20"]);
    let read = |f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
}

#[test]
fn seed_env_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let with_env = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_m2po"))
            .current_dir(d)
            .env("M2PO_SEED", "8")
            .args(args)
            .output()
            .unwrap();
        assert!(out.status.success());
    };
    with_env(&["gen", "--out", "env.jsonl", "--n-sources", "5"]);
    with_env(&["--seed", "2", "gen", "--out", "flag.jsonl", "--n-sources", "5"]);
    ok(d, &["--seed", "8", "gen", "--out", "eight.jsonl", "--n-sources", "5"]);
    ok(d, &["--seed", "2", "gen", "--out", "two.jsonl", "--n-sources", "5"]);
    let read = |f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read("env.jsonl"), read("eight.jsonl"));
    assert_eq!(read("flag.jsonl"), read("two.jsonl"));
}

#[test]
fn invalid_severity_mix_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[corpus.severity_mix]\npartial_omission = -0.25\n").unwrap();
    let out = m2po(d, &["--config", "bad.toml", "gen", "--out", "c.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("partial_omission"), "{err}");
    assert!(!d.join("c.jsonl").exists());
}

#[test]
fn validation_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("typo.toml"), "[train]\nepoch = 3\n").unwrap();
    std::fs::write(d.join("garbage.jsonl"), "{not json}\n").unwrap();
    let cases: [&[&str]; 6] = [
        &["--config", "missing.toml", "gen", "--out", "x.jsonl"],
        &["--config", "typo.toml", "gen", "--out", "x.jsonl"],
        &["score", "--corpus", "missing.jsonl", "--out", "x.jsonl"],
        &["score", "--corpus", "garbage.jsonl", "--out", "x.jsonl"],
        &["train", "--corpus", "garbage.jsonl", "--out-dir", "run", "--mode", "sft"],
        &["frobnicate"],
    ];
    for args in cases {
        assert_eq!(m2po(d, args).status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn unscored_corpus_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--out", "c.jsonl", "--n-sources", "4"]);
    for args in [
        &["train", "--corpus", "c.jsonl", "--out-dir", "run"][..],
        &["analyze", "--corpus", "c.jsonl", "--out-dir", "an"][..],
    ] {
        let out = m2po(d, args);
        assert_eq!(out.status.code(), Some(1));
        assert!(String::from_utf8_lossy(&out.stderr).contains("m2po score"));
    }
}

#[test]
fn score_fills_cards_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--out", "c.jsonl", "--n-sources", "12"]);
    ok(d, &["score", "--corpus", "c.jsonl", "--out", "s.jsonl"]);
    ok(d, &["score", "--corpus", "s.jsonl", "--out", "s2.jsonl"]);
    assert_eq!(std::fs::read(d.join("s.jsonl")).unwrap(), std::fs::read(d.join("s2.jsonl")).unwrap());
    for pool in read_pools(&d.join("s.jsonl")).unwrap() {
        // slot 0 is the reference: perfect alignment
        assert_eq!(pool.scorecards[0].s_align, 100.0);
        for c in &pool.scorecards {
            assert!((0.0..=100.0).contains(&c.r_qe) && (0.0..=100.0).contains(&c.s_align));
            assert!((c.r_s - (c.r_qe + c.s_align)).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_lambda_f_gives_qe_only() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--out", "c.jsonl", "--n-sources", "6"]);
    ok(d, &["score", "--corpus", "c.jsonl", "--out", "s.jsonl", "--lambda-f", "0"]);
    for pool in read_pools(&d.join("s.jsonl")).unwrap() {
        assert!(pool.scorecards.iter().all(|c| c.r_s == c.r_qe));
    }
}

#[test]
fn train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d, "20");
    ok(d, &["train", "--corpus", "train.scored.jsonl", "--held-out", "held.scored.jsonl", "--out-dir", "run"]);
    let run = d.join("run");
    let summary = read_json(&run.join("summary.json"));
    // 2 epochs x ceil(20 / 8)
    assert_eq!(summary["total_steps"], 6);
    assert_eq!(summary["mode"], "m2po");
    assert!(summary["final_eval"]["mean_coverage"].as_f64().unwrap() > summary["initial_eval"]["mean_coverage"].as_f64().unwrap());

    let steps: Vec<Value> = std::fs::read_to_string(run.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(steps.len(), 6);
    let alphas: Vec<f64> = steps.iter().map(|s| s["alpha"].as_f64().unwrap()).collect();
    assert_eq!((alphas[0], alphas[5]), (0.1, 0.9));
    assert!(alphas.windows(2).all(|w| w[0] <= w[1]));

    let pairs: Vec<Value> = std::fs::read_to_string(run.join("pairs.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(pairs.len(), 20);
    assert_eq!(pairs[0]["pairs"].as_array().unwrap().len(), 8);

    // eval of the checkpoint on the held-out corpus reproduces the final metrics
    let stdout = ok(d, &["eval", "--checkpoint", "run/checkpoint.json", "--corpus", "held.jsonl"]);
    let eval: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(eval, summary["final_eval"]);
}

#[test]
fn bc_only_matches_zeroed_weights_with_static_ranking() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d, "16");
    std::fs::write(d.join("zeroed.toml"), "[train]\nalpha_start = 0.0\nalpha_end = 0.0\n").unwrap();
    ok(d, &["train", "--corpus", "train.scored.jsonl", "--out-dir", "bc", "--mode", "bc_only"]);
    ok(
        d,
        &[
            "--config", "zeroed.toml", "train", "--corpus", "train.scored.jsonl", "--out-dir", "zero",
            "--lambda-pref", "0", "--lambda-rank", "0",
        ],
    );
    let read = |f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read("bc/checkpoint.json"), read("zero/checkpoint.json"));
    assert_eq!(read("bc/metrics.jsonl"), read("zero/metrics.jsonl"));
}

#[test]
fn diverging_training_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d, "16");
    let out = m2po(d, &["train", "--corpus", "train.scored.jsonl", "--out-dir", "run", "--learning-rate", "1e308"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("non-finite") && err.contains("step"), "{err}");
}

#[test]
fn eval_rejects_mismatched_vocab() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d, "8");
    ok(d, &["train", "--corpus", "train.scored.jsonl", "--out-dir", "run", "--epochs", "1"]);
    std::fs::write(d.join("small.toml"), "[task]\nvocab = 8\nmax_len = 6\n").unwrap();
    let out = m2po(d, &["--config", "small.toml", "eval", "--checkpoint", "run/checkpoint.json", "--corpus", "held.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn analyze_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--out", "c.jsonl", "--n-sources", "150"]);
    ok(d, &["score", "--corpus", "c.jsonl", "--out", "s.jsonl"]);
    let stdout = ok(d, &["analyze", "--corpus", "s.jsonl", "--out-dir", "an"]);
    assert!(stdout.contains("hallucination"));

    let csv = std::fs::read_to_string(d.join("an/scatter.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("source_id,candidate_idx,hallucination,omission,coverage,qe"));
    assert_eq!(lines.count(), 150 * 16);

    let report = read_json(&d.join("an/report.json"));
    assert_eq!(report["scatter_rows"], 2400);
    let inside = report["residual_variance"]["inside"].as_f64().unwrap();
    let outside = report["residual_variance"]["outside"].as_f64().unwrap();
    assert!(inside > outside, "{inside} vs {outside}");
    let metrics = report["motivation"]["metrics"].as_array().unwrap();
    assert_eq!(metrics.len(), 2);
    let text = std::fs::read_to_string(d.join("an/report.txt")).unwrap();
    assert_eq!(text, stdout);
}
