use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hetpref"));
    cmd.args(args).current_dir(dir).env_remove("HETPREF_SEED");
    if let Some(s) = seed_env {
        cmd.env("HETPREF_SEED", s);
    }
    cmd.output().unwrap()
}

fn header(path: &Path) -> serde_json::Value {
    let text = fs::read_to_string(path).unwrap();
    serde_json::from_str(text.lines().next().unwrap()).unwrap()
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.json"), r#"{"bogus": 1}"#).unwrap();
    let cases: [&[&str]; 5] = [
        &["gen-data", "--config", "bad.json"],
        &["gen-data", "--kind", "anonymous", "--samples", "10"],
        &["gen-data", "--no-such-flag"],
        &["train", "--data", "missing.jsonl", "--method", "dpo", "--out", "p.json"],
        &["grad-check", "--loss", "nonsense"],
    ];
    for args in cases {
        assert_eq!(run(d, args, None).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("junk.jsonl"), "not json\n").unwrap();
    let out = run(d, &["train", "--data", "junk.jsonl", "--method", "dpo", "--out", "p.json"], None);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flags_override_config_and_seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.json"), r#"{"kind": "anonymous", "samples": 5, "out": "a.jsonl", "seed": 4}"#).unwrap();
    assert!(run(d, &["gen-data", "--config", "cfg.json", "--samples", "7"], None).status.success());
    let text = fs::read_to_string(d.join("a.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 8);
    assert_eq!(header(&d.join("a.jsonl"))["seed"], 4);

    assert!(run(d, &["gen-data", "--kind", "anonymous", "--samples", "3", "--out", "b.jsonl"], Some("9")).status.success());
    assert_eq!(header(&d.join("b.jsonl"))["seed"], 9);
    assert!(run(d, &["gen-data", "--kind", "anonymous", "--samples", "3", "--out", "c.jsonl"], None).status.success());
    assert_eq!(header(&d.join("c.jsonl"))["seed"], 0);
}

#[test]
fn method_and_data_kind_must_agree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(run(d, &["gen-data", "--kind", "anonymous", "--samples", "50", "--out", "a.jsonl"], None).status.success());
    let out = run(d, &["train", "--data", "a.jsonl", "--method", "consistent", "--out", "p.json"], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_then_eval_produces_parameters_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(run(d, &["gen-data", "--kind", "anonymous", "--samples", "2000", "--out", "a.jsonl"], None).status.success());
    let out = run(d, &["train", "--data", "a.jsonl", "--method", "dpo", "--epochs", "2", "--out", "p.json"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let params: serde_json::Value = serde_json::from_slice(&fs::read(d.join("p.json")).unwrap()).unwrap();
    assert_eq!(params["format"], "hetpref-params-v1");
    assert_eq!(params["n_prompts"], 40);
    let out = run(d, &["eval", "--params", "p.json", "--out", "e.json", "--curves-dir", "curves"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(d.join("curves/curve_policy.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("delta,mean,stderr"));
    assert_eq!(csv.lines().count(), 41);
}

#[test]
fn verify_examples_reports_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["verify-examples"], None);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<_> = text.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|l| l.starts_with("PASS")));
}
