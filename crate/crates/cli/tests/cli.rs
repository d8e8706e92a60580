use std::path::Path;
use std::process::{Command, Output};

fn boxplace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boxplace")).args(args).env_remove("BOXPLACE_BASE_URL").output().expect("spawn")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_eval_report_render() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, val, run) = (d.join("d.jsonl"), d.join("v.jsonl"), d.join("run"));
    assert!(boxplace(&["gen", "--out", s(&data), "--count", "8", "--seed", "1"]).status.success());
    assert!(boxplace(&["gen", "--out", s(&val), "--count", "3", "--seed", "2", "--container"]).status.success());
    let out = boxplace(&["train", "--data", s(&data), "--val", s(&val), "--out", s(&run), "--max-steps", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("model.ckpt").exists());
    assert!(run.join("train_log.csv").exists());

    let ev = d.join("eval");
    let ckpt = run.join("model.ckpt");
    let out = boxplace(&["eval", "--data", s(&data), "--model", s(&ckpt), "--out", s(&ev)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "table.csv", "buckets_area.csv", "buckets_ntext.csv"] {
        assert!(ev.join(f).exists(), "{f}");
    }
    let table = std::fs::read_to_string(ev.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);

    let rep = d.join("rep");
    assert!(boxplace(&["report", "--metrics", s(&ev.join("metrics.csv")), "--out", s(&rep)]).status.success());
    assert_eq!(std::fs::read_to_string(rep.join("table.csv")).unwrap(), table);

    let out = boxplace(&["render", "--data", s(&data), "--metrics", s(&ev.join("metrics.csv")), "--out", s(&ev)]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_dir(ev.join("overlays")).unwrap().count(), 8);
}

#[test]
fn mock_predictor_and_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    assert!(boxplace(&["gen", "--out", s(&data), "--count", "5"]).status.success());
    let out_dir = dir.path().join("mock");
    let out = boxplace(&["eval", "--data", s(&data), "--predictor", "mock", "--mock-reply", "not json", "--out", s(&out_dir)]);
    assert!(out.status.success());
    let transcripts = std::fs::read_to_string(out_dir.join("transcripts.jsonl")).unwrap();
    assert_eq!(transcripts.lines().count(), 5);
    assert!(transcripts.contains("invalid_format"));

    let out = boxplace(&["prompt", "--data", s(&data)]);
    assert!(out.status.success());
    let records: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(records.as_array().is_some_and(|a| !a.is_empty()));
}

#[test]
fn exit_codes() {
    assert_eq!(boxplace(&["nope"]).status.code(), Some(1));
    assert_eq!(boxplace(&["eval", "--data", "/nonexistent.jsonl", "--out", "/tmp/x", "--predictor", "mock"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    assert!(boxplace(&["gen", "--out", s(&data), "--count", "2"]).status.success());
    let out = dir.path().join("q");
    assert_eq!(boxplace(&["query", "--data", s(&data), "--out", s(&out)]).status.code(), Some(3));
}
