use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BRONZE: &str = "greater { count { filter_eq { all_rows ; bronze ; \"tatiana ryabkina\" } } ; \
                      count { filter_eq { all_rows ; bronze ; \"lena eliasson\" } } }";
const ONLY_SWEDEN: &str = "only { filter_eq { all_rows ; nation ; sweden } }";

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn golden(name: &str) -> String {
    fs::read_to_string(fixtures().join("golden").join(name)).unwrap()
}

fn progfv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_progfv"))
        .args(args)
        .current_dir(fixtures())
        .env_remove("PROGFV_DATA_ROOT")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = progfv(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const SEARCH_LIMITS: [&str; 6] = ["--max-ops", "4", "--max-candidates", "20", "--time-budget-ms", "0"];
const DATA: [&str; 4] = ["--tables", "tables", "--statements", "statements.jsonl"];

#[test]
fn exec_prints_root_value() {
    assert_eq!(ok(&["exec", "--table", "tables/medals.csv", "--program", "count { all_rows }"]), golden("exec_count.txt"));
}

#[test]
fn exec_trace_is_json() {
    let out = ok(&["exec", "--table", "tables/medals.csv", "--program", BRONZE, "--trace"]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("true"));
    let trace: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(trace.as_array().unwrap().len(), 5);
    assert_eq!(trace[4]["op"], "greater");
}

#[test]
fn verbalize_matches_golden() {
    assert_eq!(ok(&["verbalize", "--table", "tables/medals.csv", "--program", BRONZE]), golden("verbalize_bronze.txt"));
}

#[test]
fn verbalize_options() {
    let dropped = ok(&["verbalize", "--table", "tables/medals.csv", "--program", BRONZE, "--drop-root"]);
    assert_eq!(dropped.lines().count(), 4);
    assert!(golden("verbalize_bronze.txt").starts_with(&dropped));

    let spans: serde_json::Value = serde_json::from_str(&ok(&[
        "verbalize",
        "--table",
        "tables/medals.csv",
        "--program",
        ONLY_SWEDEN,
        "--spans",
        "--raw-case",
    ]))
    .unwrap();
    assert_eq!(spans["sentences"].as_array().unwrap().len(), 2);
    let first = &spans["spans"][0];
    assert_eq!(first[1]["text"], "sweden");
    assert_eq!(first[1]["source"], "argument");
}

#[test]
fn search_partitions_by_label() {
    let mut args = vec!["search", "--statement", "sweden has 3 gold", "--table", "tables/medals.csv"];
    args.extend(SEARCH_LIMITS);
    let out = ok(&args);
    let lines: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!lines.is_empty() && lines.len() <= 20);
    for l in &lines {
        let want = if l["label"] == 1 { "consistent" } else { "inconsistent" };
        assert_eq!(l["partition"], want);
    }

    // batch mode, with and without threads
    let mut batch = vec!["search"];
    batch.extend(DATA);
    batch.extend(SEARCH_LIMITS);
    let serial = ok(&batch);
    batch.extend(["--jobs", "3"]);
    assert_eq!(ok(&batch), serial);
    let ids: std::collections::BTreeSet<String> = serial
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["statement_id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(ids.len(), 6);
}

#[test]
fn graph_json_and_dot() {
    let json = ok(&[
        "graph",
        "--statement",
        "sweden is the only nation with gold 3",
        "--table",
        "tables/medals.csv",
        "--program",
        ONLY_SWEDEN,
    ]);
    assert_eq!(json, golden("graph_only.json"));
    let dot = ok(&["graph", "--statement", "x", "--table", "tables/medals.csv", "--program", ONLY_SWEDEN, "--format", "dot"]);
    assert_eq!(dot, golden("graph_only.dot"));
}

#[test]
fn report_renders_golden_markdown() {
    assert_eq!(ok(&["report", "--metrics", "report.json"]), golden("report.md"));
}

#[test]
fn rank_then_verify_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let path = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    let (rank, programs, ver, eval) = (path("rank"), path("programs.jsonl"), path("ver"), path("eval.json"));

    let mut train = vec!["rank-train", "--epochs", "2", "--seed", "0", "--loss", "ce", "--out", &rank];
    train.extend(DATA);
    train.extend(SEARCH_LIMITS);
    let summary: serde_json::Value = serde_json::from_str(&ok(&train)).unwrap();
    assert_eq!(summary["count"], 6);
    for f in ["selector.bin", "selector.json", "vocab.json", "config.json", "metrics.jsonl"] {
        assert!(dir.path().join("rank").join(f).exists(), "{f}");
    }
    let config: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("rank/config.json")).unwrap()).unwrap();
    assert_eq!(config["config"]["loss"], "ce");

    let mut eval_args = vec!["rank-eval", "--model", &rank, "--seed", "0", "--export", &programs, "--jobs", "2"];
    eval_args.extend(DATA);
    eval_args.extend(SEARCH_LIMITS);
    let accuracy: serde_json::Value = serde_json::from_str(&ok(&eval_args)).unwrap();
    assert!((0.0..=1.0).contains(&accuracy["selection_accuracy"].as_f64().unwrap()));
    let exported = fs::read_to_string(&programs).unwrap();
    assert_eq!(exported.lines().count(), 6);

    let mut vt = vec![
        "verify-train",
        "--programs",
        &programs,
        "--epochs",
        "3",
        "--dim",
        "8",
        "--heads-dim",
        "4",
        "--layers",
        "2",
        "--freeze-statement-table-steps",
        "1",
        "--gate-updated",
        "--seed",
        "0",
        "--val-fraction",
        "0.34",
        "--out",
        &ver,
    ];
    vt.extend(DATA);
    let summary: serde_json::Value = serde_json::from_str(&ok(&vt)).unwrap();
    assert_eq!(summary["train"], 4);
    assert_eq!(summary["val"], 2);
    let metrics = fs::read_to_string(dir.path().join("ver/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    let mut ve = vec!["verify-eval", "--model", &ver, "--programs", &programs, "--seed", "0", "--output", &eval];
    ve.extend(DATA);
    let serial: serde_json::Value = serde_json::from_str(&ok(&ve)).unwrap();
    assert_eq!(serial["count"], 6);
    assert_eq!(serial["tags"]["simple"]["count"], 3);
    ve.extend(["--jobs", "4"]);
    let threaded: serde_json::Value = serde_json::from_str(&ok(&ve)).unwrap();
    assert_eq!(serial["count"], threaded["count"]);
    assert!((serial["accuracy"].as_f64().unwrap() - threaded["accuracy"].as_f64().unwrap()).abs() < 1e-12);

    let table = ok(&["report", "--metrics", &eval]);
    assert!(table.contains("| simple |") && table.contains("| complex |"));
}

#[test]
fn synthetic_training_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["verify-train", "--synthetic", "24", "--epochs", "2", "--dim", "8", "--seed", "3", "--no-graph-attention", "--out", out.to_str().unwrap()]);
        fs::read(out.join("metrics.jsonl")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["no_graph"], true);

    let report = ok(&["verify-eval", "--model", dir.path().join("a").to_str().unwrap(), "--synthetic", "10", "--seed", "7"]);
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["count"], 10);
}

#[test]
fn config_file_sets_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"epochs": 1, "dim": 6, "att_dim": 3}"#).unwrap();
    let out = dir.path().join("m");
    ok(&["verify-train", "--synthetic", "10", "--config", config.to_str().unwrap(), "--seed", "0", "--out", out.to_str().unwrap()]);
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["epochs"], 1);
    assert_eq!(saved["dim"], 6);
    assert_eq!(saved["layers"], 1);
}

#[test]
fn data_root_resolves_relative_paths() {
    let out = Command::new(env!("CARGO_BIN_EXE_progfv"))
        .args(["exec", "--table", "tables/medals.csv", "--program", "count { all_rows }"])
        .env("PROGFV_DATA_ROOT", fixtures())
        .current_dir(std::env::temp_dir())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "4\n");
}

#[test]
fn exit_codes() {
    let unknown = progfv(&["frobnicate"]);
    assert_eq!(unknown.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&unknown.stderr);
    assert!(stderr.contains("verify-train"), "help is shown: {stderr}");

    assert_eq!(progfv(&["verify-train", "--synthetic", "4", "--out", "x"]).status.code(), Some(1));
    assert_eq!(progfv(&["exec", "--table", "missing.csv", "--program", "count { all_rows }"]).status.code(), Some(2));
    assert_eq!(progfv(&["exec", "--table", "tables/medals.csv", "--program", "count {"]).status.code(), Some(2));
    assert_eq!(progfv(&["report", "--metrics", "statements.jsonl"]).status.code(), Some(2));
    assert_eq!(progfv(&["--help"]).status.code(), Some(0));
}
