use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn docrep(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_docrep"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn json_ok(dir: &Path, args: &[&str]) -> Value {
    let out = docrep(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn small_corpus(dir: &Path) {
    json_ok(dir, &["synth-docs", "--out", "corpus", "--classes", "3", "--per-class", "4"]);
}

#[test]
fn synth_extract_and_eval_report_every_split() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let ex = json_ok(dir.path(), &["extract", "--manifest", "corpus/manifest.jsonl", "--descriptor", "rl", "--out", "rl.dfs"]);
    assert_eq!(ex["rows"], 12);
    assert_eq!(ex["dim"], 10648);

    let ev = json_ok(dir.path(), &["eval", "retrieval", "--features", "rl.dfs", "--repeats", "3", "--report", "r.jsonl"]);
    let splits = ev["splits"].as_array().unwrap();
    assert_eq!(splits.len(), 3);
    for s in splits {
        for k in ["retrieval.map", "retrieval.p@1", "retrieval.p@5"] {
            assert!(s["metrics"][k].is_number(), "{k} missing in {s}");
        }
    }
    assert!(ev["summary"]["retrieval.map"]["mean"].is_number());
    let report = std::fs::read_to_string(dir.path().join("r.jsonl")).unwrap();
    assert!(report.lines().count() >= 3);

    let ncm = json_ok(dir.path(), &["eval", "ncm", "--features", "rl.dfs"]);
    assert_eq!(ncm["splits"].as_array().unwrap().len(), 5);
    let acc = ncm["summary"]["ncm.accuracy"]["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn classifiers_train_and_predict() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    json_ok(dir.path(), &["extract", "--manifest", "corpus/manifest.jsonl", "--descriptor", "rl", "--out", "rl.dfs"]);
    json_ok(dir.path(), &["train-svm", "--features", "rl.dfs", "--validation", "rl.dfs", "--out", "svm.dmd"]);
    let p = json_ok(dir.path(), &["predict", "--model", "svm.dmd", "--features", "rl.dfs", "--out", "p.jsonl"]);
    assert_eq!(p["rows"], 12);
    assert!(p["accuracy"].as_f64().unwrap() > 0.9);
    let lines = std::fs::read_to_string(dir.path().join("p.jsonl")).unwrap();
    let first: Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert!(first["predicted"].as_str().unwrap().starts_with("class"));

    let m = json_ok(
        dir.path(),
        &["train-mlp", "--features", "rl.dfs", "--set", "mlp.epochs=3", "--set", "mlp.hidden_width=8", "--out", "mlp.dmd"],
    );
    assert_eq!(m["epochs"], 3);
    let h = json_ok(
        dir.path(),
        &["extract", "--manifest", "corpus/manifest.jsonl", "--descriptor", "hybrid-act", "--mlp", "mlp.dmd", "--out", "h.dfs"],
    );
    assert_eq!(h["dim"], 8);
}

#[test]
fn config_file_and_overrides_are_applied() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.conf"), "# corpus\nsynth.classes = 2\nsynth.per_class = 3\n").unwrap();
    let s = json_ok(dir.path(), &["--config", "c.conf", "synth-docs", "--out", "c", "--set", "synth.per_class=2"]);
    assert_eq!(s["images"], 4);
    let s = json_ok(dir.path(), &["synth-docs", "--out", "d", "--config", "c.conf", "--classes", "3"]);
    assert_eq!(s["images"], 9);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    json_ok(dir.path(), &["extract", "--manifest", "corpus/manifest.jsonl", "--descriptor", "rl", "--out", "rl.dfs"]);

    assert_eq!(docrep(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(docrep(dir.path(), &["eval", "ncm"]).status.code(), Some(1));
    let unknown = docrep(dir.path(), &["eval", "ncm", "--features", "rl.dfs", "--set", "eval.sed=3"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("eval.sed"));
    let bad_desc = docrep(dir.path(), &["extract", "--manifest", "corpus/manifest.jsonl", "--descriptor", "sift", "--out", "x.dfs"]);
    assert_eq!(bad_desc.status.code(), Some(1));

    let missing = docrep(dir.path(), &["predict", "--model", "models/none.dmd", "--features", "rl.dfs"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("models/none.dmd"));
    let needs_gmm = docrep(dir.path(), &["extract", "--manifest", "corpus/manifest.jsonl", "--descriptor", "fv16", "--out", "x.dfs"]);
    assert_eq!(needs_gmm.status.code(), Some(2));

    std::fs::write(dir.path().join("junk.dfs"), b"DFS1\x01").unwrap();
    let junk = docrep(dir.path(), &["eval", "cluster", "--features", "junk.dfs"]);
    assert_eq!(junk.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&junk.stderr).contains("byte"));
    assert_eq!(docrep(dir.path(), &["--help"]).status.code(), Some(0));
}
