use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn scenario() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/shelf_deadlock.json")
}

fn acs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acs")).args(args).env_clear().output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = acs(args);
    assert!(out.status.success(), "acs {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Capability map shared by every test in this file.
fn capability() -> &'static Path {
    static CAP: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    &CAP.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cap.bin");
        ok(&["precompute", "--scenario", scenario().to_str().unwrap(), "--out", path.to_str().unwrap()]);
        (dir, path)
    })
    .1
}

fn batch(out: &Path, seeds: &str, modes: &str) -> String {
    ok(&[
        "batch",
        "--scenario",
        scenario().to_str().unwrap(),
        "--capability",
        capability().to_str().unwrap(),
        "--seeds",
        seeds,
        "--modes",
        modes,
        "--out",
        out.to_str().unwrap(),
    ])
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn batch_writes_every_run_and_repeats_byte_for_byte() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    batch(a.path(), "0..3", "noncomm,r2h,shared");
    batch(b.path(), "0,1,2", "noncomm,r2h,shared");

    let mut names: Vec<_> = fs::read_dir(a.path().join("reports")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 9);
    for name in &names {
        let ra = fs::read(a.path().join("reports").join(name)).unwrap();
        let rb = fs::read(b.path().join("reports").join(name)).unwrap();
        assert_eq!(ra, rb, "{name:?} differs between batches");
    }
    for f in ["aggregate.json", "runs.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
    let csv = fs::read_to_string(a.path().join("runs.csv")).unwrap();
    // Header plus one row per agent per run.
    assert_eq!(csv.lines().count(), 1 + 9 * 2);
}

#[test]
fn sharing_breaks_the_shelf_deadlock() {
    let dir = tempfile::tempdir().unwrap();
    batch(dir.path(), "0..3", "noncomm,shared");
    let agg = read_json(&dir.path().join("aggregate.json"));
    let modes = agg["modes"].as_array().unwrap();
    let completed = |label: &str| {
        modes.iter().find(|m| m["mode"] == label).map(|m| m["completed"].as_u64().unwrap()).unwrap()
    };
    assert_eq!(completed("shared"), 3);
    assert_eq!(completed("noncomm"), 0);
}

#[test]
fn run_then_replay_matches_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&[
        "run",
        "--scenario",
        scenario().to_str().unwrap(),
        "--capability",
        capability().to_str().unwrap(),
        "--seed",
        "4",
        "--mode",
        "shared",
        "--out",
        out.to_str().unwrap(),
    ]);
    for f in ["report.json", "log.jsonl", "metrics.csv"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["outcome"], "completed");
    let printed = ok(&[
        "replay",
        "--log",
        out.join("log.jsonl").to_str().unwrap(),
        "--report",
        out.join("report.json").to_str().unwrap(),
    ]);
    let replayed: Value = serde_json::from_str(&printed).unwrap();
    assert_eq!(replayed, report["metrics"]);
}

#[test]
fn replay_rejects_a_truncated_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&[
        "run",
        "--scenario",
        scenario().to_str().unwrap(),
        "--capability",
        capability().to_str().unwrap(),
        "--max-time",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    let log = fs::read_to_string(out.join("log.jsonl")).unwrap();
    let truncated: Vec<&str> = log.lines().collect();
    let path = dir.path().join("cut.jsonl");
    fs::write(&path, truncated[..truncated.len() - 1].join("\n")).unwrap();
    let res = acs(&["replay", "--log", path.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(4));
}

#[test]
fn bad_inputs_exit_with_config_error() {
    let res = acs(&["run", "--scenario", "/nonexistent.json", "--out", "/tmp/x"]);
    assert_eq!(res.status.code(), Some(2));
    let res = acs(&[
        "run",
        "--scenario",
        scenario().to_str().unwrap(),
        "--capability",
        capability().to_str().unwrap(),
        "--dt",
        "0",
        "--out",
        "/tmp/x",
    ]);
    assert_eq!(res.status.code(), Some(2));
    let res = acs(&["batch", "--scenario", scenario().to_str().unwrap(), "--modes", "telepathy", "--out", "/tmp/x"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn capability_for_another_grid_is_rejected() {
    let other = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/cleaning_room.json");
    let res = acs(&[
        "validate",
        "--scenario",
        other.to_str().unwrap(),
        "--capability",
        capability().to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("different grid"));
}

#[test]
fn validate_lists_objects_and_bins() {
    let text = ok(&["validate", "--scenario", scenario().to_str().unwrap(), "--capability", capability().to_str().unwrap()]);
    assert!(text.starts_with("shelf_deadlock: valid, 4 objects, 3 bins"));
    assert_eq!(text.lines().filter(|l| l.trim_start().starts_with("object")).count(), 4);
}
