use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_branchline"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

const DANGLING: &str = r#"{
  "tree_id": "bad",
  "entry": "A",
  "edges": [
    {"transition_key": "t1", "node_from": "A", "node_to": "B"},
    {"transition_key": "t2", "node_from": "A", "node_to": "Z"}
  ],
  "node_meta": {"A": {"question": "q"}, "B": {"question": "done"}}
}"#;

const LOOPED: &str = r#"{
  "tree_id": "loop",
  "entry": "A",
  "edges": [
    {"transition_key": "t1", "node_from": "A", "node_to": "B"},
    {"transition_key": "t2", "node_from": "B", "node_to": "C"},
    {"transition_key": "t3", "node_from": "C", "node_to": "B"}
  ]
}"#;

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), DANGLING).unwrap();
    let out = run(dir.path(), &["validate", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
    let report = json(&out);
    assert_eq!(report["is_valid"], false);
    assert_eq!(report["dangling_edges"][0]["missing"], "Z");

    assert_eq!(run(dir.path(), &["synth", "tree", "--nodes", "60", "--out", "good.json"]).status.code(), Some(0));
    let out = run(dir.path(), &["validate", "good.json"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["stats"]["node_count"], 60);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["validate", "--no-such-flag", "x"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["chat", "--strategy", "sideways"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["validate", "missing.json"]).status.code(), Some(1));
}

#[test]
fn ingest_stores_only_valid_trees() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("loop.json"), LOOPED).unwrap();
    let out = run(dir.path(), &["--store", "st", "ingest", "loop.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["validation"]["unescapable_loops"], serde_json::json!([["B", "C"]]));
    assert!(!dir.path().join("st/trees/loop").exists());

    run(dir.path(), &["synth", "tree", "--nodes", "40", "--format", "csv", "--out", "t.csv"]);
    let out = run(dir.path(), &["--store", "st", "ingest", "--tree-id", "csvtree", "t.csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out);
    assert_eq!((report["version"].as_u64(), report["stored"].as_bool()), (Some(1), Some(true)));
    let out = run(dir.path(), &["--store", "st", "ingest", "--tree-id", "csvtree", "t.csv"]);
    assert_eq!(json(&out)["version"], 2);
    assert!(dir.path().join("st/trees/csvtree/2.json").exists());
    assert_eq!(run(dir.path(), &["ingest", "t.csv"]).status.code(), Some(1), "no store configured");
}

#[test]
fn eval_is_byte_stable_with_a_script() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(d, &["synth", "tree", "--nodes", "80", "--out", "tree.json"]);
    run(d, &["synth", "dataset", "--tree", "tree.json", "--out", "ds.jsonl"]);
    run(
        d,
        &["synth", "script", "--tree", "tree.json", "--dataset", "ds.jsonl", "--strategy", "arbor", "--out", "s.jsonl"],
    );
    let eval = |tag: &str| {
        let out_file = format!("report-{tag}.json");
        let rec_file = format!("records-{tag}.jsonl");
        let out = run(
            d,
            &[
                "eval", "--strategy", "arbor", "--dataset", "ds.jsonl", "--tree", "tree.json", "--runs", "5", "--model",
                "GPT-4.1", "--script", "s.jsonl", "--out", &out_file, "--records", &rec_file,
            ],
        );
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        (std::fs::read(d.join(out_file)).unwrap(), std::fs::read_to_string(d.join(rec_file)).unwrap())
    };
    let (report_a, records_a) = eval("a");
    let (report_b, records_b) = eval("b");
    assert_eq!(report_a, report_b);
    assert_eq!(records_a, records_b);
    assert_eq!(records_a.lines().count(), 870);
    let summary: serde_json::Value = serde_json::from_slice(&report_a).unwrap();
    let cell = &summary["cells"][0];
    assert_eq!((cell["runs"].as_u64(), cell["turns"].as_u64()), (Some(5), Some(174)));
    assert_eq!(cell["accuracy_mean"], 100.0);
}

#[test]
fn aggregate_reads_cells_csv() {
    let dir = tempfile::tempdir().unwrap();
    let header = "model_id,strategy,runs,turns,accuracy_mean,accuracy_sd,latency_mean_s,latency_median_s,cost_mean_usd,failed_turns,navigation_errors";
    let csv = format!("{header}\nm1,arbor,5,174,90,0,5,5,0.01,0,0\nm1,baseline,5,174,60,0,10,10,0.2,0,0\nm2,arbor,5,174,80,0,7,7,0.03,0,0\nm2,baseline,5,174,40,0,30,30,0.2,0,0\n");
    std::fs::write(dir.path().join("cells.csv"), csv).unwrap();
    let out = run(dir.path(), &["aggregate", "cells.csv", "--format", "json"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["deltas"]["accuracy_points"], 35.0);
    assert_eq!(v["deltas"]["cost_ratio"], 10.0);
}

#[test]
fn local_chat_with_scripted_backend() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let tree = r#"{"tree_id": "k", "entry": "A", "edges": [
        {"transition_key": "t1", "node_from": "A", "node_to": "B", "answer": "pain"},
        {"transition_key": "t2", "node_from": "B", "node_to": "C", "answer": "severe"}]}"#;
    std::fs::write(d.join("k.json"), tree).unwrap();
    let script = [
        r#"{"step_tag": "evaluation", "text": "{\"scratchpad\": \"yes\", \"next_state\": \"t1\"}"}"#,
        r#"{"step_tag": "evaluation", "text": "{\"scratchpad\": \"open\", \"next_state\": \"B\"}"}"#,
        r#"{"step_tag": "generation", "text": "How severe?"}"#,
        r#"{"step_tag": "evaluation", "text": "{\"scratchpad\": \"bad\", \"next_state\": \"t2\"}"}"#,
        r#"{"step_tag": "generation", "text": "Please seek care."}"#,
    ]
    .join("\n");
    std::fs::write(d.join("script.jsonl"), script).unwrap();
    std::fs::write(
        d.join("cfg.toml"),
        "store = \"st\"\n[backend]\nkind = \"scripted\"\nscript = \"script.jsonl\"\nvirtual_clock = true\n",
    )
    .unwrap();
    assert_eq!(run(d, &["--config", "cfg.toml", "ingest", "k.json"]).status.code(), Some(0));
    let mut child = bin()
        .current_dir(d)
        .args(["--config", "cfg.toml", "chat", "--show-trace", "--context", "age=41"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"it hurts\n\nvery much\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("agent [B]> How severe?"), "{stdout}");
    assert!(stdout.contains("hop 1: A -> B [t1] yes"));
    assert!(stdout.contains("hop 2: B -> B [stay] open"));
    assert!(stdout.contains("agent [C]> Please seek care."));

    let stderr = String::from_utf8(out.stderr).unwrap();
    let session = stderr.lines().find_map(|l| l.strip_prefix("session ")).unwrap().trim().to_string();
    let out = run(d, &["--config", "cfg.toml", "trace", &session]);
    let trace = json(&out);
    assert_eq!(trace["hops"].as_array().unwrap().len(), 3);
    assert_eq!(trace["current_node"], "C");
    assert_eq!(trace["turns"], 2);
}
