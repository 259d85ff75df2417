use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "n_train_scenes=60",
    "n_purifier_scenes=30",
    "n_heldout_scenes=6",
    "epochs=1",
    "purifier_epochs=1",
    "max_new_tokens=6",
    "n_questions=8",
];

fn cmivld(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cmivld"));
    cmd.current_dir(dir).args(args);
    for s in SMALL {
        cmd.args(["--set", s]);
    }
    cmd.output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = cmivld(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn error_record(out: &Output) -> Value {
    let line = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(line.lines().last().unwrap()).unwrap()
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn trained(dir: &Path) {
    ok(dir, &["synth-gen", "--out", "gen"]);
    ok(dir, &["train-model", "--out", "tm"]);
    ok(dir, &["train-purifier", "--out", "tp"]);
}

#[test]
fn pipeline_is_deterministic_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    for run in ["a", "b"] {
        let out = format!("dec_{run}");
        ok(d, &["decode", "--variant", "full", "--lambda", "0.5", "--gamma", "0.8", "--seed", "7", "--out", &out]);
    }
    let a = read(d.join("dec_a/results.jsonl"));
    assert_eq!(a, read(d.join("dec_b/results.jsonl")));
    assert_eq!(a.lines().count(), 6);

    let manifest: Value = serde_json::from_str(&read(d.join("dec_a/run.json"))).unwrap();
    assert_eq!(manifest["command"], "decode");
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["version"].as_str().is_some_and(|v| !v.is_empty()));
    assert!(manifest["wall_time_seconds"].as_f64().is_some());
    assert_eq!(manifest["config"]["lambda"], "0.5");

    // the manifest alone reproduces the run
    let replay = Command::new(env!("CARGO_BIN_EXE_cmivld"))
        .current_dir(d)
        .args(["decode", "--config", "dec_a/run.json", "--out", "dec_c"])
        .output()
        .unwrap();
    assert!(replay.status.success(), "{}", String::from_utf8_lossy(&replay.stderr));
    assert_eq!(a, read(d.join("dec_c/results.jsonl")));

    for cmd in ["eval-chair", "eval-pope"] {
        ok(d, &[cmd, "--out", cmd]);
        let row: Value = serde_json::from_str(read(d.join(cmd).join("results.jsonl")).trim()).unwrap();
        assert_eq!(row["variant"], "full");
    }
}

#[test]
fn sweep_reports_each_point_and_the_minimum() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    ok(d, &["sweep", "--param", "lambda", "--values", "0,0.1,...,0.9", "--out", "sw"]);
    let rows: Vec<Value> = read(d.join("sw/results.jsonl"))
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let points: Vec<&Value> = rows.iter().filter(|r| r["param"] == "lambda" && r.get("c_s").is_some()).collect();
    assert_eq!(points.len(), 10);
    let off = rows.iter().find(|r| r["value"] == "vision_only").unwrap();
    assert_eq!(points[0]["c_s"], off["c_s"]);
    assert_eq!(points[0]["c_i"], off["c_i"]);
    let min = points.iter().map(|p| p["c_s"].as_f64().unwrap()).fold(f64::INFINITY, f64::min);
    let summary = rows.last().unwrap();
    assert_eq!(summary["min_c_s"].as_f64().unwrap(), min);
}

#[test]
fn verification_commands_pass() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = cmivld(d, &["oracle-check", "--trials", "100", "--out", "oc"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("max factorization deviation"));
    let manifest: Value = serde_json::from_str(&read(d.join("oc/run.json"))).unwrap();
    assert_eq!(manifest["summary"]["passed"], true);

    ok(d, &["gradcheck", "--trials", "5", "--out", "gc"]);
    let manifest: Value = serde_json::from_str(&read(d.join("gc/run.json"))).unwrap();
    assert_eq!(manifest["summary"]["passed"], true);
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let missing = cmivld(d, &["decode", "--model", "absent.ckpt", "--out", "x"]);
    assert_eq!(missing.status.code(), Some(2));
    let rec = error_record(&missing);
    assert_eq!(rec["error"], "io");
    assert_eq!(rec["exit_code"], 2);

    let missing_config = cmivld(d, &["decode", "--config", "nope.cfg"]);
    assert_eq!(missing_config.status.code(), Some(2));

    for args in [
        &["decode", "--set", "lamda=0.5"][..],
        &["decode", "--lambda", "lots"],
        &["decode", "--bogus-flag"],
        &["decode", "--variant", "sideways"],
    ] {
        let out = cmivld(d, args);
        assert_eq!(out.status.code(), Some(3), "{args:?}");
        assert_eq!(error_record(&out)["error"], "invalid_config");
    }

    ok(d, &["synth-gen", "--out", "gen"]);
    let nan = cmivld(d, &["train-model", "--set", "learning_rate=1e30", "--out", "nan"]);
    assert_eq!(nan.status.code(), Some(4), "{}", String::from_utf8_lossy(&nan.stderr));
    assert_eq!(error_record(&nan)["error"], "numerical");
}

#[test]
fn keys_lists_every_default() {
    let out = Command::new(env!("CARGO_BIN_EXE_cmivld")).arg("keys").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["lambda = 0.5", "gamma = 0.8", "alpha = 100", "beta = 500", "purify_layer = 2"] {
        assert!(text.contains(key), "{key}");
    }
}
