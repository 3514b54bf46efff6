//! Runs the `cakd` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cakd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cakd")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// A short blobs config writing into `dir`.
fn write_config(dir: &Path) -> String {
    let cfg = dir.join("run.cfg");
    fs::write(
        &cfg,
        "# short run\ntrain.epochs = 3\nteacher.epochs = 3\nseeds = 1,2\noutput_dir = out\n",
    )
    .unwrap();
    cfg.to_str().unwrap().to_string()
}

#[test]
fn verify_passes_and_is_reproducible() {
    let a = cakd(&["verify"]);
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    assert!(stdout(&a).ends_with("overall: PASS\n"));
    let b = cakd(&["verify"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn injected_fault_fails_verify() {
    let o = cakd(&["verify", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL decoupling-identity"));
}

#[test]
fn teacher_distill_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");

    let t = cakd(&["train-teacher", "--config", &cfg]);
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    let ckpt = out.join("teacher.ckpt");
    assert!(fs::read(&ckpt).unwrap().starts_with(b"CAKD1"));

    let d = cakd(&["distill", "--config", &cfg, "--teacher", ckpt.to_str().unwrap(), "--mode", "cakd-full"]);
    assert!(d.status.success(), "{}", String::from_utf8_lossy(&d.stderr));
    let metrics = out.join("distill-cakd-full.csv");
    let csv = fs::read_to_string(&metrics).unwrap();
    assert!(csv.starts_with("run_id,seed,epoch,split,accuracy,ce,site,"));
    assert!(!csv.contains('\r'));

    let report_dir = dir.path().join("report");
    let r = cakd(&["report", metrics.to_str().unwrap(), "--out", report_dir.to_str().unwrap()]);
    assert!(r.status.success());
    let summary = stdout(&r);
    assert_eq!(summary.lines().count(), 2);
    assert!(summary.lines().nth(1).unwrap().starts_with("cakd-full,2,"));
    for f in ["final.csv", "summary.csv", "series.csv"] {
        assert!(report_dir.join(f).is_file());
    }
}

#[test]
fn bad_arguments_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = cakd(&["ablate", "--config", &cfg, "--sweep", "gamma", "--teacher", "missing.ckpt"]);
    assert!(!o.status.success());
    let o = cakd(&["ablate", "--config", &cfg, "--sweep", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("invalid argument"));
    assert!(!cakd(&["report"]).status.success());
    let o = cakd(&["distill", "--config", &cfg, "--teacher", "nope.ckpt", "--mode", "dkd"]);
    assert_eq!(o.status.code(), Some(2));
}
