use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rtgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtgen")).args(args).env_remove("RTGEN_DB").output().expect("spawn rtgen")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).expect("utf-8 stdout")
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .expect("csv written")
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn viol(rows: &[Vec<String>], policy: &str) -> f64 {
    rows.iter().find(|r| r[0] == policy).expect("policy row")[2].parse().expect("numeric violation")
}

#[test]
fn run_reports_standalone_latency() {
    let o = rtgen(&["run", "--builtin", "A", "--policy", "ftf"]);
    assert!(o.status.success());
    let line = stdout(&o).lines().find(|l| l.starts_with("FTF")).expect("FTF row").to_string();
    let cells: Vec<&str> = line.split_whitespace().collect();
    assert_eq!(cells, ["FTF", "-", "1577.9", "45.9"]);
}

#[test]
fn unknown_policy_is_a_usage_error() {
    let o = rtgen(&["run", "--builtin", "A", "--policy", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nonsense"));
}

#[test]
fn starved_run_still_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = rtgen(&["run", "--builtin", "C", "--policy", "edf-dyn", "--out", out, "--trace"]);
    assert!(o.status.success());
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("scenario_c_edf-dyn.json")).unwrap()).unwrap();
    assert_eq!(json["starved"], true);
    assert_eq!(json["policy"], "EDF-DYN");
    assert!(json["ttft_ms"].is_null());
    let trace = fs::read_to_string(dir.path().join("scenario_c_edf-dyn.trace.jsonl")).unwrap();
    assert!(trace.lines().any(|l| l.contains("\"request_starve\"")));
    let rows = csv_rows(&dir.path().join("scenario_c_edf-dyn.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].last().map(String::as_str), Some("true"));
}

#[test]
fn compare_a_gives_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = rtgen(&["compare", "--builtin", "A", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let rows = csv_rows(&dir.path().join("scenario_a_compare.csv"));
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r[1..] == rows[0][1..]));
}

#[test]
fn compare_d_favours_ftf_over_fcfs_dyn() {
    let dir = tempfile::tempdir().unwrap();
    let o = rtgen(&["compare", "--builtin", "D", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let rows = csv_rows(&dir.path().join("scenario_d_compare.csv"));
    assert!(viol(&rows, "FTF") < viol(&rows, "FCFS-DYN"));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("scenario_d_compare.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().map(Vec::len), Some(5));
}

#[test]
fn compare_per_model_lists_frame_models() {
    let dir = tempfile::tempdir().unwrap();
    let o = rtgen(&["compare", "--builtin", "C", "--per-model", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    for m in ["SR-120", "SR-60", "Seg"] {
        assert!(text.contains(m), "missing {m} in\n{text}");
    }
    let rows = csv_rows(&dir.path().join("scenario_c_compare_per_model.csv"));
    assert_eq!(rows.iter().filter(|r| r[2] == "SR-120").count(), 5);
}

#[test]
fn sweep_rows_follow_token_order() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = rtgen(&["sweep", "--builtin", "D", "--policy", "ftf", "--tokens", "2048,32", "--out", out]);
    assert!(o.status.success());
    let rows = csv_rows(&dir.path().join("scenario_d_ftf_sweep.csv"));
    let tokens: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(tokens, ["2048", "32"]);
    let v: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(v[0] > v[1]);

    let one = rtgen(&["sweep", "--builtin", "D", "--policy", "ftf", "--tokens", "32"]);
    assert_eq!(stdout(&one).lines().filter(|l| l.trim_start().starts_with("32 ")).count(), 1);
}

#[test]
fn sweep_beyond_the_largest_bucket_is_rejected() {
    let o = rtgen(&["sweep", "--builtin", "D", "--policy", "ftf", "--tokens", "4096"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_inputs_exit_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(rtgen(&["run", "--scenario", missing.to_str().unwrap(), "--policy", "ftf"]).status.code(), Some(2));

    let broken = dir.path().join("broken.json");
    fs::write(&broken, r#"{"id": "x", "models": []}"#).unwrap();
    assert_eq!(rtgen(&["compare", "--scenario", broken.to_str().unwrap()]).status.code(), Some(2));

    assert_eq!(rtgen(&["compare"]).status.code(), Some(2));
    assert_eq!(rtgen(&["compare", "--builtin", "E"]).status.code(), Some(2));
}

#[test]
fn scenario_files_and_builtins_agree() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.json");
    fs::write(&path, rtgen_core::workload::builtin_document(rtgen_core::BuiltinScenario::B)).unwrap();
    let from_file = rtgen(&["compare", "--scenario", path.to_str().unwrap()]);
    let builtin = rtgen(&["compare", "--builtin", "B"]);
    assert!(from_file.status.success());
    assert_eq!(from_file.stdout, builtin.stdout);
}

#[test]
fn db_flag_and_environment_select_the_database() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("db.csv");
    fs::write(&good, rtgen_core::LatencyDatabase::calibrated_csv()).unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "model,stage,context,backend,latency_ms\nSR,Forward,0,GPU,-1\n").unwrap();
    let bin = env!("CARGO_BIN_EXE_rtgen");
    let args = ["run", "--builtin", "A", "--policy", "ftf"];

    let env_bad = Command::new(bin).args(args).env("RTGEN_DB", &bad).output().unwrap();
    assert_eq!(env_bad.status.code(), Some(2));
    let flag_wins =
        Command::new(bin).args(args).args(["--db", good.to_str().unwrap()]).env("RTGEN_DB", &bad).output().unwrap();
    assert!(flag_wins.status.success());
    let env_good = Command::new(bin).args(args).env("RTGEN_DB", &good).output().unwrap();
    assert_eq!(env_good.stdout, rtgen(&args).stdout);
}

#[test]
fn repeated_invocations_are_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run =
        |dir: &Path| rtgen(&["compare", "--builtin", "D", "--per-model", "--trace", "--out", dir.to_str().unwrap()]);
    let (oa, ob) = (run(a.path()), run(b.path()));
    assert_eq!(oa.stdout, ob.stdout);
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 3 + 5);
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n:?} differs");
    }
}

#[test]
fn hidden_oracle_command_checks_seeds() {
    let o = rtgen(&["oracle", "--seed", "5", "--count", "4", "--builtin", "B"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("4/4 instances hold"));
    assert!(text.contains("log2 schedule space"));
}
