//! End-to-end runs of the `skolemqe` binary on tiny inputs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skolemqe")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Graph, full-structure entailment queries and a few training steps.
fn pipeline(dir: &Path) {
    let kg = dir.join("kg");
    let q = dir.join("q.jsonl");
    let ckpt = dir.join("m.ckpt");
    ok(&["gen-kg", "--entities", "30", "--relations", "3", "--seed", "1", "--out", s(&kg)]);
    ok(&["gen-queries", "--kg", s(&kg), "--mode", "entailment", "--per-structure", "4", "--seed", "2", "--out", s(&q)]);
    ok(&[
        "train",
        "--kg",
        s(&kg),
        "--queries",
        s(&q),
        "--set",
        "dim=4",
        "--set",
        "hidden=8",
        "--set",
        "batch_size=16",
        "--set",
        "negatives=4",
        "--set",
        "task=entailment",
        "--steps",
        "6",
        "--out",
        s(&ckpt),
    ]);
}

#[test]
fn oracle_answers_the_toy_query() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("train.tsv"), "a\tr\tb\na\tr\tc\nc\tq\td\n").unwrap();
    fs::write(dir.path().join("valid.tsv"), "").unwrap();
    fs::write(dir.path().join("test.tsv"), "").unwrap();
    let out = ok(&["oracle", "--kg", s(dir.path()), "--query", "EXISTS T . r(a,T)"]);
    assert_eq!(out.trim(), "{b,c}");
}

#[test]
fn train_eval_and_answer() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    assert!(dir.path().join("m.ckpt.config.txt").exists());
    let log = fs::read_to_string(dir.path().join("m.ckpt.log.csv")).unwrap();
    assert!(log.starts_with("step,loss,pos_score,neg_score,repairs,seconds\n"));

    let csv = dir.path().join("eval.csv");
    ok(&["eval", "--ckpt", s(&ckpt), "--queries", s(&dir.path().join("q.jsonl")), "--out", s(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut names: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    names.dedup();
    names.retain(|n| !n.ends_with("_avg"));
    assert_eq!(names.len(), 14, "{text}");

    let out = ok(&["answer", "--ckpt", s(&ckpt), "--query", "EXISTS T . r0(e0,T)", "--topk", "3"]);
    let scores: Vec<f64> = out
        .lines()
        .map(|l| {
            let (_, score) = l.split_once('\t').unwrap();
            score.parse().unwrap()
        })
        .collect();
    assert_eq!(scores.len(), 3, "{out}");
    assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    let query = "EXISTS X, T . r0(e0,X) AND r1(X,T)";
    let explained = ok(&["answer", "--ckpt", s(&ckpt), "--query", query, "--topk", "1", "--explain", "2"]);
    let lines: Vec<&str> = explained.lines().collect();
    assert_eq!(lines.len(), 2, "{explained}");
    assert!(lines[1].starts_with("# node ") && lines[1].split_whitespace().count() == 7, "{explained}");
}

#[test]
fn exit_codes_distinguish_failures() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["eval", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["oracle", "--kg", "/nonexistent", "--query", "EXISTS T . r(a,T)"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let other = dir.path().join("other");
    ok(&["gen-kg", "--entities", "30", "--relations", "3", "--seed", "9", "--out", s(&other)]);
    let ckpt = dir.path().join("m.ckpt");
    let q = dir.path().join("q.jsonl");
    let out = run(&["eval", "--ckpt", s(&ckpt), "--kg", s(&other), "--queries", s(&q), "--out", "/dev/null"]);
    assert_eq!(out.status.code(), Some(2));

    let kg = dir.path().join("kg");
    let blown = dir.path().join("blown.ckpt");
    let out = run(&[
        "train",
        "--kg",
        s(&kg),
        "--queries",
        s(&q),
        "--set",
        "dim=4",
        "--set",
        "hidden=8",
        "--set",
        "lr=1e300",
        "--set",
        "task=entailment",
        "--steps",
        "5",
        "--out",
        s(&blown),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
