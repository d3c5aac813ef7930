use std::path::Path;
use std::process::{Command, Output};

fn kdbound(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdbound"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn synth(dir: &Path) {
    let out = kdbound(dir, &["data", "synth", "--n", "20", "--d", "5", "--gamma", "0.2", "--seed", "1", "--out", "ds.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_writes_data_direction_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let data = std::fs::read_to_string(dir.path().join("ds.csv")).unwrap();
    let mut lines = data.lines();
    assert_eq!(lines.next(), Some("y,x0,x1,x2,x3,x4"));
    assert_eq!(lines.count(), 20);
    assert!(dir.path().join("ds.direction.txt").exists());
    let manifest = std::fs::read_to_string(dir.path().join("ds.csv.manifest")).unwrap();
    assert!(manifest.starts_with("command=data synth\n"));
    assert!(manifest.contains("\nconfig.data.synth.gamma=0.2\n"));
    assert!(manifest.contains("\noutput=ds.csv\n"));
}

#[test]
fn train_records_one_row_per_iterate_and_passes_descent() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = kdbound(
        dir.path(),
        &["train", "--data", "ds.csv", "--T", "36", "--eta", "0.1667", "--m", "64", "--B", "inf", "--record-reference", "--out", "t.csv"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert!(trace.starts_with("t,r_kl,r_hard,r_class,"));
    assert_eq!(trace.lines().count(), 1 + 36);
    assert!(dir.path().join("t.ckpt").exists());
    assert!(dir.path().join("t.labels.csv").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS descent"), "{stdout}");
    let manifest = std::fs::read_to_string(dir.path().join("t.csv.manifest")).unwrap();
    assert!(manifest.contains("\nconfig.train.radius=inf\n"));
    assert!(manifest.contains("\ndigest.ds.csv="));
}

#[test]
fn rerun_reproduces_output_bytes() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = kdbound(dir.path(), &["train", "--data", "ds.csv", "--T", "20", "--m", "32", "--seed", "5", "--out", "t.csv"]);
    assert!(out.status.success());
    let first = std::fs::read(dir.path().join("t.csv")).unwrap();
    std::fs::remove_file(dir.path().join("t.csv")).unwrap();
    let out = kdbound(dir.path(), &["rerun", "--manifest", "t.csv.manifest"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(dir.path().join("t.csv")).unwrap(), first);
}

#[test]
fn verify_descent_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = kdbound(dir.path(), &["verify", "descent", "--runs", "2", "--T", "50", "--out", "d.csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
    assert!(csv.starts_with("check_name,trials,violations,"));
    assert!(csv.lines().skip(1).all(|l| l.contains(",true,")));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(kdbound(dir.path(), &["sweep", "--bogus", "--out", "s.csv"]).status.code(), Some(1));
    assert_eq!(kdbound(dir.path(), &["train"]).status.code(), Some(1));
    synth(dir.path());
    assert_eq!(kdbound(dir.path(), &["train", "--data", "ds.csv", "--eta=-1", "--out", "x.csv"]).status.code(), Some(1));
    assert_eq!(kdbound(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = kdbound(dir.path(), &["train", "--data", "absent.csv", "--out", "t.csv"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[verify.descent]\nruns = 1\nm = 16\nT = 30\n").unwrap();
    let out = kdbound(dir.path(), &["--config", "c.toml", "verify", "descent", "--m", "8", "--out", "d.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(dir.path().join("d.csv.manifest")).unwrap();
    assert!(manifest.contains("\nconfig.verify.descent.m=8\n"), "{manifest}");
    assert!(manifest.contains("\nconfig.verify.descent.runs=1\n"));
    assert!(manifest.contains("\ndigest.config="));

    std::fs::write(dir.path().join("bad.toml"), "[verify.descent]\nwidth = 3\n").unwrap();
    let out = kdbound(dir.path(), &["--config", "bad.toml", "verify", "descent", "--out", "d.csv"]);
    assert_eq!(out.status.code(), Some(1));
}
