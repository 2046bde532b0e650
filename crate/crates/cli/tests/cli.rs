use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn sample(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/sample")
        .join(name)
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn cup(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cup"))
        .arg("--config")
        .arg(sample("cup.toml"))
        .args(args)
        .output()
        .expect("cup runs")
}

fn ok(args: &[&str]) -> Value {
    let out = cup(args);
    assert!(
        out.status.success(),
        "cup {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON line")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn manifest(output: &Path) -> Value {
    let mut name = output.file_name().unwrap().to_os_string();
    name.push(".manifest.json");
    serde_json::from_slice(&std::fs::read(output.with_file_name(name)).unwrap()).unwrap()
}

#[test]
fn augment_matches_golden_groups() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("groups.jsonl");
    let summary = ok(&[
        "augment",
        "--dataset",
        p(&sample("train.jsonl")),
        "--out",
        p(&out),
    ]);
    assert_eq!(summary["groups_out"], 40);
    assert_eq!(summary["discarded"], 0);
    assert_eq!(
        std::fs::read(&out).unwrap(),
        std::fs::read(golden("train.groups.jsonl")).unwrap()
    );

    let m = manifest(&out);
    assert_eq!(m["command"], "augment");
    assert_eq!(m["seed"], 42);
    for role in ["config", "dataset", "corpus"] {
        assert_eq!(m["inputs"][role].as_str().unwrap().len(), 64, "{role}");
    }
    assert!(m["config_digest"].is_string());
    assert!(m["prompt_version"].is_string());
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let val = dir.path().join("val.jsonl");
    ok(&[
        "augment",
        "--dataset",
        p(&sample("valid.jsonl")),
        "--out",
        p(&val),
    ]);
    let train = golden("train.groups.jsonl");
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    for ckpt in [&a, &b] {
        let r = ok(&[
            "train",
            "--groups",
            p(&train),
            "--val",
            p(&val),
            "--out",
            p(ckpt),
        ]);
        assert_eq!(r["val_top1"], 1.0);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(manifest(&a)["output_sha256"], manifest(&b)["output_sha256"]);
    assert!(!jsonl(&dir.path().join("a.ckpt.log.jsonl")).is_empty());

    let c = dir.path().join("c.ckpt");
    ok(&[
        "train",
        "--groups",
        p(&train),
        "--val",
        p(&val),
        "--seed",
        "7",
        "--out",
        p(&c),
    ]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn evaluate_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let gold = sample("test.jsonl");
    let pred = dir.path().join("pred.jsonl");
    let lines: Vec<String> = jsonl(&gold)
        .iter()
        .map(|s| serde_json::json!({ "id": s["id"], "prediction": s["new_comment"] }).to_string())
        .collect();
    std::fs::write(&pred, lines.join("\n") + "\n").unwrap();
    let report = dir.path().join("report.jsonl");
    let csv = dir.path().join("crosstab.csv");
    let out = ok(&[
        "evaluate",
        "--pred",
        p(&pred),
        "--gold",
        p(&gold),
        "--out",
        p(&report),
        "--crosstab",
        p(&csv),
    ]);
    let avg = &out["summary"]["averages"];
    assert_eq!(avg["accuracy"], 1.0);
    assert_eq!(avg["aed"], 0.0);
    assert_eq!(avg["samples"], 12);

    let rows = jsonl(&report);
    assert_eq!(rows.len(), 13);
    assert!(rows[..12].iter().all(|r| r["accuracy"] == 1));
    assert_eq!(rows[12], out);
    let table = std::fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("source,count,samples,accuracy\n"));
    assert_eq!(table.lines().count(), 7);
    assert_eq!(
        manifest(&report)["inputs"]["gold"].as_str().unwrap().len(),
        64
    );
}

#[test]
fn update_then_evaluate_with_random_ranker() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.jsonl");
    ok(&["update", "--ranker", "random", "--out", p(&pred)]);
    let rows = jsonl(&pred);
    assert_eq!(rows.len(), 12);
    for r in &rows {
        let ranked = r["ranked"].as_array().unwrap();
        assert_eq!(ranked.len(), 4);
        assert_eq!(r["prediction"], ranked[0]["text"]);
    }
    let again = dir.path().join("again.jsonl");
    ok(&["update", "--ranker", "random", "--out", p(&again)]);
    assert_eq!(
        std::fs::read(&pred).unwrap(),
        std::fs::read(&again).unwrap()
    );
}

#[test]
fn self_ranking_keeps_the_judge_order() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.jsonl");
    ok(&["update", "--ranker", "self", "--out", p(&pred)]);
    let rows = jsonl(&pred);
    assert_eq!(rows.len(), 12);
    // The sample fixture's judge always answers Expert 1, 2, ... in order.
    for r in &rows {
        let ranked = r["ranked"].as_array().unwrap();
        assert_eq!(ranked.len(), 4);
        assert_eq!(r["prediction"], ranked[0]["text"]);
        assert_eq!(ranked[0]["shots"], 0);
        assert!(ranked[0]["score"].is_null());
    }
}

#[test]
fn type_and_retrieve_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let types = dir.path().join("types.jsonl");
    let out = ok(&["type", "--out", p(&types)]);
    assert_eq!(out["summary"]["NonCodeInd/MultiTokens"], 12);
    assert_eq!(jsonl(&types).len(), 13);

    let nn = dir.path().join("nn.jsonl");
    let index = dir.path().join("index.bin");
    ok(&[
        "retrieve",
        "--k",
        "3",
        "--save-index",
        p(&index),
        "--out",
        p(&nn),
    ]);
    let rows = jsonl(&nn);
    assert!(rows
        .iter()
        .all(|r| r["neighbors"].as_array().unwrap().len() == 3));

    let from_index = dir.path().join("nn2.jsonl");
    ok(&[
        "retrieve",
        "--k",
        "3",
        "--index",
        p(&index),
        "--out",
        p(&from_index),
    ]);
    assert_eq!(
        std::fs::read(&nn).unwrap(),
        std::fs::read(&from_index).unwrap()
    );
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    serde_json::from_str(stderr.trim()).unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = cup(&["evaluate", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"]["kind"], "usage");
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cup(&["update", "--out", p(&dir.path().join("x.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("--checkpoint"));
}

#[test]
fn runtime_errors_carry_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.jsonl");
    std::fs::write(&pred, "{\"id\":\"nope\",\"prediction\":\"x\"}\n").unwrap();
    let out = cup(&[
        "evaluate",
        "--pred",
        p(&pred),
        "--gold",
        p(&sample("test.jsonl")),
        "--out",
        p(&dir.path().join("r.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"]["kind"], "contract");
}
