mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use common::fixture;

fn construct(config: &Path, run: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_construct"))
        .arg("--config")
        .arg(config)
        .arg("--run")
        .arg(run)
        .args(args)
        .output()
        .expect("binary runs")
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn detect_writes_one_record_per_unit() {
    let run = tempfile::tempdir().unwrap();
    let out = construct(&fixture("small/construct.toml"), run.path(), &["detect"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = jsonl(&run.path().join("detection.jsonl"));
    assert_eq!(rows[0]["schema"], "construct/detection");
    assert_eq!(rows[0]["version"], 1);
    assert!(rows[0]["config_hash"].as_str().unwrap().len() == 64);
    assert_eq!(rows.len(), 11);
    let yes = rows[1..].iter().filter(|r| r["label"] == "yes").count();
    assert_eq!(yes, 5);
}

#[test]
fn replay_reports_every_file_unchanged() {
    let run = tempfile::tempdir().unwrap();
    let config = fixture("planted/construct.toml");
    let decisions = fixture("planted/review.jsonl");
    let out = construct(
        &config,
        run.path(),
        &["run", "--decisions", decisions.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = construct(&config, run.path(), &["replay"]);
    assert!(out.status.success());
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let files = report["files"].as_array().unwrap();
    assert!(files.len() >= 10);
    assert!(files.iter().all(|f| f["unchanged"] == true), "{report}");
}

#[test]
fn headless_review_list_apply_export() {
    let run = tempfile::tempdir().unwrap();
    let config = fixture("planted/construct.toml");
    assert!(construct(&config, run.path(), &["genclasses"]).status.success());

    let out = construct(
        &config,
        run.path(),
        &["review", "list", "--status", "proposed", "--sort", "name", "--k", "1"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let page: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(page["total"], 6);

    let out = construct(&config, run.path(), &["review", "export"]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "review");

    let decisions = fixture("planted/review.jsonl");
    let out = construct(
        &config,
        run.path(),
        &["review", "apply", "--decisions", decisions.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let applied: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(applied["finalized"], true);

    let out = construct(&config, run.path(), &["review", "export"]);
    let set: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(set["classes"].as_array().unwrap().len(), 6);
}

#[test]
fn config_problems_are_listed_together() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(
        &config,
        r#"
pipeline_kind = "frames_sentence"
workers = 0
reask_cap = 2

[corpus]
path = "missing.jsonl"
format = "json_lines"

[batch]
batch_size = 0
carryover = 0.9

[endpoint]
kind = "mock"
fixture = "missing.toml"
"#,
    )
    .unwrap();
    let out = construct(&config, &dir.path().join("run"), &["config", "check"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");
    let problems = err["error"]["problems"].as_array().unwrap();
    assert!(problems.len() >= 4, "{problems:?}");
}

#[test]
fn topics_defaults_use_batches_of_100_and_cap_21() {
    let dir = tempfile::tempdir().unwrap();
    let corpus: String = (0..250)
        .map(|i| format!("{{\"id\": \"t{i:03}\", \"title\": \"Debate {i}\", \"text\": \"Speech number {i} on public matters.\"}}\n"))
        .collect();
    fs::write(dir.path().join("corpus.jsonl"), corpus).unwrap();
    fs::write(
        dir.path().join("mock.toml"),
        r#"
[[rule]]
stage = "summarize"
reply = "The speech covers public matters. It asks for action."

[[rule]]
stage = "classgen"
reply = '{"frame-categories": [{"topic": "Public Matters", "prompt": "Is it about public matters?", "Count": 1}]}'
"#,
    )
    .unwrap();
    fs::write(
        dir.path().join("construct.toml"),
        "pipeline_kind = \"topics\"\n[corpus]\npath = \"corpus.jsonl\"\nformat = \"json_lines\"\n[endpoint]\nkind = \"mock\"\nfixture = \"mock.toml\"\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = construct(&dir.path().join("construct.toml"), &run, &["genclasses"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let plan: Value = serde_json::from_str(&fs::read_to_string(run.join("batches.json")).unwrap()).unwrap();
    let plan = &plan["data"];
    assert_eq!(plan["batch_size"], 100);
    assert_eq!(plan["classes_per_call_cap"], 21);
    let batches = plan["batches"].as_array().unwrap();
    assert!(batches
        .iter()
        .all(|b| b["carried"].as_array().unwrap().len() + b["fresh"].as_array().unwrap().len() <= 100));
    assert!(!run.join("detection.jsonl").exists());
}

#[test]
fn config_mismatch_is_refused() {
    let run = tempfile::tempdir().unwrap();
    assert!(construct(&fixture("small/construct.toml"), run.path(), &["ingest"])
        .status
        .success());
    let out = construct(&fixture("planted/construct.toml"), run.path(), &["ingest"]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "store");
}
