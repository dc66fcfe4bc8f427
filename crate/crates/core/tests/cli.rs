mod common;

use std::path::{Path, PathBuf};

use common::*;
use esrr::atoms::{Family, SparseSignal};
use esrr::config::{CertificateMethod, ExperimentConfig, KernelSpec};
use esrr::harness::CSV_HEADER;
use esrr::Sign;
use tempfile::TempDir;

fn write_config(dir: &TempDir, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> (i32, String) {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    esrr(&args)
}

fn scalar_config(u0: &SparseSignal) -> ExperimentConfig {
    experiment(Family::ScalarBlasso, harmonic_spec(), u0, region(0.1, &[1e-2, 1e-3, 1e-4], &[1.0], &[1, 2]))
}

fn certified_config() -> ExperimentConfig {
    scalar_config(&certified_scalar(1).pop().unwrap().u0)
}

#[test]
fn validate_kernels_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(&dir, "good.json", &certified_config());
    let (code, stdout) = run("validate-kernels", &good, dir.path(), &[]);
    assert_eq!(code, 0);
    assert_eq!(stdout.lines().filter(|l| l.ends_with(" ok")).count(), N);

    let mut stub = certified_config();
    if let KernelSpec::FourierFeatures { derivative_stub, .. } = &mut stub.kernel {
        *derivative_stub = true;
    }
    let stub = write_config(&dir, "stub.json", &stub);
    assert_eq!(run("validate-kernels", &stub, dir.path(), &[]).0, 2);

    let broken = dir.path().join("broken.json");
    let text = certified_config().to_json();
    std::fs::write(&broken, &text[..text.len() / 2]).unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_esrr"))
        .args(["validate-kernels", "--config", broken.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line "));
}

#[test]
fn argument_errors() {
    assert_eq!(esrr(&["--help"]).0, 0);
    assert_eq!(esrr(&["certify"]).0, 1);
    assert_eq!(esrr(&["frobnicate"]).0, 1);
    assert_eq!(esrr(&["certify", "--config", "/nonexistent/config.json"]).0, 1);
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(&dir, "good.json", &certified_config());
    assert_eq!(run("solve", &good, dir.path(), &["--lambda", "-1"]).0, 1);
    assert_eq!(run("solve", &good, dir.path(), &["--lambda", "0.01", "--noise-frac", "2"]).0, 1);
}

#[test]
fn certify_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = certified_config();
    cfg.certificate.method = CertificateMethod::Both;
    let path = write_config(&dir, "cfg.json", &cfg);
    let (code, _) = run("certify", &path, dir.path(), &[]);
    assert_eq!(code, 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("mndsc_report.json")).unwrap()).unwrap();
    assert_eq!(report["verdict"], "pass");
    assert_eq!(report["methods"].as_array().unwrap().len(), 2);
    assert!(report["relative_disagreement"].as_f64().unwrap() < 1e-3);
    let echoed: ExperimentConfig = serde_json::from_value(report["config"].clone()).unwrap();
    assert_eq!(echoed, cfg);
    let trace = std::fs::read_to_string(dir.path().join("eta_trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("x,eta_1,norm"));
    assert_eq!(lines.count(), 2048);
}

#[test]
fn certify_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(&dir, "cfg.json", &certified_config());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run("certify", &path, &a, &[]).0, 0);
    assert_eq!(run("certify", &path, &b, &[]).0, 0);
    for f in ["mndsc_report.json", "eta_trace.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn opposite_spikes_too_close_are_infeasible() {
    // a degree-10 trigonometric polynomial bounded by 1 has slope at most 20 pi, too little to
    // swing from 1 to -1 over 0.025
    let dir = tempfile::tempdir().unwrap();
    let u0 = SparseSignal::new(vec![torus_spike(1.0, Sign::Plus, 0.2), torus_spike(1.0, Sign::Minus, 0.225)]).unwrap();
    let mut cfg = scalar_config(&u0);
    cfg.epsilon = 0.01;
    let path = write_config(&dir, "cfg.json", &cfg);
    assert_eq!(run("certify", &path, dir.path(), &[]).0, 3);
    assert_eq!(run("sweep", &path, dir.path(), &[]).0, 3);
}

#[test]
fn indistinguishable_support_fails_certification() {
    // on a bank of period 1/2 the spikes at 0.2 and 0.7 have identical images
    let dir = tempfile::tempdir().unwrap();
    let u0 = SparseSignal::new(vec![torus_spike(1.0, Sign::Plus, 0.2), torus_spike(0.5, Sign::Plus, 0.7)]).unwrap();
    let cfg = experiment(Family::ScalarBlasso, even_harmonic_spec(), &u0, region(0.1, &[1e-2], &[1.0], &[1]));
    let path = write_config(&dir, "cfg.json", &cfg);
    assert_eq!(run("certify", &path, dir.path(), &[]).0, 4);
}

#[test]
fn solve_prints_one_row_per_atom() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = certified_config();
    let path = write_config(&dir, "cfg.json", &cfg);
    let (code, stdout) = run("solve", &path, dir.path(), &["--lambda", "1e-4"]);
    assert_eq!(code, 0);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("torus-spike")).count(), 3);
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("solve_result.json")).unwrap()).unwrap();
    assert_eq!(result["result"]["converged"], true);

    let (code, stdout) = run("solve", &path, dir.path(), &["--lambda", "1e6"]);
    assert_eq!(code, 0);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("torus-spike")).count(), 0);

    let empty = write_config(&dir, "empty.json", &scalar_config(&SparseSignal::empty()));
    let (code, stdout) = run("solve", &empty, dir.path(), &["--lambda", "1e-2"]);
    assert_eq!(code, 0);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("torus-spike")).count(), 0);
}

#[test]
fn solve_reports_the_iteration_cap() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = certified_config();
    cfg.solver.max_outer_iters = 1;
    let path = write_config(&dir, "cfg.json", &cfg);
    assert_eq!(run("solve", &path, dir.path(), &["--lambda", "1e-3"]).0, 5);
}

#[test]
fn sweep_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = certified_config();
    let path = write_config(&dir, "ok.json", &cfg);
    let (code, stdout) = run("sweep", &path, dir.path(), &[]);
    assert_eq!(code, 0);
    assert!(stdout.contains("empirical lambda0"));
    let csv = std::fs::read_to_string(dir.path().join("esrr_report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER.join(","));
    assert_eq!(csv.lines().count(), 1 + 6);

    let mut noisy = cfg.clone();
    noisy.region.alpha = 10.0;
    noisy.region.lambda_grid = vec![1e-1, 1e-2];
    noisy.region.lambda0 = 1e-1;
    let path = write_config(&dir, "noisy.json", &noisy);
    let (code, stdout) = run("sweep", &path, &dir.path().join("noisy"), &[]);
    assert_eq!(code, 7);
    assert!(stdout.contains("lambda"));
}

#[test]
fn configs_round_trip_at_full_precision() {
    for seed in 0..50 {
        let cfg = experiment(Family::Demixing, harmonic_spec(), &demixing_signal(seed), region(0.1, &[1e-2], &[1.0], &[1]));
        let text = cfg.to_json();
        let again = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_json(), text);
    }
}
