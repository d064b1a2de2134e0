//! Black-box checks of the binary: subcommands, exit codes, seed override.

use std::path::Path;
use std::process::Command;

fn splitsim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_splitsim"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path
}

const DESK: &str = r#"{
    "topology": "ssfl",
    "node_count": 9,
    "shard_count": 3,
    "clients_per_shard": 2,
    "cycles": 1,
    "seed": 3,
    "blobs_per_class": 6,
    "blobs_side": 8,
    "batch_size": 8,
    "patience": null
}"#;

#[test]
fn validate_accepts_good_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), DESK);
    let out = splitsim().args(["validate"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{:?}", out);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"topology": "ssfl", "node_count": 9, "seed": 1, "oops": 2}"#);
    let out = splitsim().args(["validate"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("oops"));
}

#[test]
fn run_writes_outputs_and_seed_override_applies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), DESK);
    let out_dir = dir.path().join("results");
    let out = splitsim()
        .args(["run"])
        .arg(&cfg)
        .args(["--seed", "99", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{:?}", out);
    let summary = std::fs::read_to_string(out_dir.join("summary.json")).unwrap();
    assert!(summary.contains("\"seed\": 99"));
    assert!(out_dir.join("metrics.csv").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("final test loss"), "{}", stdout);
}

#[test]
fn compare_needs_completed_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = splitsim()
        .args(["compare"])
        .arg(dir.path())
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
