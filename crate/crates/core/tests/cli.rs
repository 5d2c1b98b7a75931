//! The command-line binary: exit codes, config-file handling and the
//! files each command writes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn querydrift(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_querydrift"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn small_pipeline(dir: &Path) {
    for args in [
        &["gen-data", "--rows", "3000", "--columns", "4"][..],
        &["gen-workload", "--queries", "600", "--predicates", "2"][..],
    ] {
        let out = querydrift(dir, args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn pipeline_writes_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    small_pipeline(dir.path());
    let out = querydrift(dir.path(), &["bootstrap", "--vigilance", "10"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("wrote ") && stdout.trim_end().ends_with("device.json"));

    let data = fs::read_to_string(dir.path().join("data.csv")).unwrap();
    assert_eq!(data.lines().count(), 3001);
    let workload = fs::read_to_string(dir.path().join("workload.jsonl")).unwrap();
    assert_eq!(workload.lines().count(), 600);
    let device: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("device.json")).unwrap()).unwrap();
    assert_eq!(device["format"], "querydrift.device");
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("exp.conf");
    fs::write(&conf, "# small table\nrows = 300\ncolumns = 2\nseed = 9\n").unwrap();
    let out = querydrift(
        dir.path(),
        &["gen-data", "--config", conf.to_str().unwrap(), "--rows", "120"],
    );
    assert_eq!(code(&out), 0);
    let data = fs::read_to_string(dir.path().join("data.csv")).unwrap();
    assert_eq!(data.lines().count(), 121);
    assert_eq!(data.lines().next().unwrap().split(',').count(), 2);
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "rows = 10\nno_such_key = 1\n").unwrap();
    let cases: [&[&str]; 5] = [
        &["gen-data", "--rows", "many"],
        &["gen-data", "--config", conf.to_str().unwrap()],
        // inputs that do not exist
        &["bootstrap"],
        // threshold multiplier outside [3, 5]
        &["run-drift", "--h-sigmas", "2"],
        // drift inputs are all-or-none
        &["run-drift", "--drift-data", "data.csv"],
    ];
    for args in cases {
        let out = querydrift(dir.path(), args);
        assert_eq!(code(&out), 2, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
    }
}

#[test]
fn runtime_failures_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    small_pipeline(dir.path());
    // a huge spawn threshold leaves a single cluster, which cannot
    // calibrate the detector
    let out = querydrift(dir.path(), &["bootstrap", "--vigilance", "1e9"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lower the vigilance"));
    assert!(!dir.path().join("device.json").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        small_pipeline(dir);
        assert_eq!(code(&querydrift(dir, &["bootstrap", "--vigilance", "10"])), 0);
    }
    for name in ["data.csv", "workload.jsonl", "device.json"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}
