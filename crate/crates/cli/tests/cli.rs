//! End-to-end tests for the mfcert binary: pipelines, artifacts, exit codes,
//! and byte-level reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mfcert")
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary must execute")
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).expect("artifact must exist")).expect("valid JSON")
}

#[test]
fn solve_then_certify_gaussian_pair() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("solve");
    let model = fixtures().join("gaussian_pair.json");

    let st = run(&["solve", "--model", model.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    let qstar = out.join("qstar.json");
    assert!(qstar.exists() && out.join("elbo_trace.csv").exists());
    assert!(out.join("manifest.json").exists());

    let cert_out = dir.path().join("cert");
    let st = run(&[
        "certify",
        "--model",
        model.to_str().unwrap(),
        "--qstar",
        qstar.to_str().unwrap(),
        "--out",
        cert_out.to_str().unwrap(),
    ]);
    assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    let cert = read_json(&cert_out.join("cert.json"));
    let lo = cert["logz_lo"].as_f64().unwrap();
    let hi = cert["logz_hi"].as_f64().unwrap();
    assert!((lo - 1.432412).abs() < 1e-5, "lo = {lo}");
    assert!((hi - 1.599078).abs() < 1e-5, "hi = {hi}");
    // The interval contains the closed-form logZ.
    assert!(lo <= 1.4913035 && 1.4913035 <= hi);
    let summary = fs::read_to_string(cert_out.join("summary.txt")).unwrap();
    assert!(summary.contains("certified: logZ ∈ ["), "summary: {summary}");

    let manifest = read_json(&cert_out.join("manifest.json"));
    assert_eq!(manifest["status"], "ok");
    assert!(manifest["inputs"]
        .as_object()
        .unwrap()
        .values()
        .all(|v| v.as_str().unwrap().starts_with("sha256:")));
}

#[test]
fn missing_model_exits_one_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let st = run(&[
        "solve",
        "--model",
        dir.path().join("nope.json").to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(st.status.code(), Some(1));
    let manifest = read_json(&dir.path().join("out/manifest.json"));
    assert_eq!(manifest["status"], "error");
    assert_eq!(manifest["error_code"], "E_IO_MODEL");
}

#[test]
fn certify_gate_trip_exits_two_and_writes_cert() {
    // Hand-build an asymmetric product measure: the Tr(J^2) symmetry gate
    // must refuse while the certificate is still written.
    let dir = tempfile::tempdir().unwrap();
    let grid = mfcert_core::grid1d::Grid::new(-12.0, 12.0, 257).unwrap();
    let make = |mean: f64| {
        let logw: Vec<f64> = grid.points().map(|x| -(x - mean) * (x - mean) / 2.0).collect();
        mfcert_core::grid1d::normalize(logw, grid).unwrap()
    };
    let qstar =
        mfcert_core::grid1d::ProductMeasure::new(vec![make(0.0), make(0.5)]).unwrap();
    let qstar_path = dir.path().join("qstar.json");
    fs::write(&qstar_path, serde_json::to_string(&qstar).unwrap()).unwrap();

    let out = dir.path().join("out");
    let st = run(&[
        "certify",
        "--model",
        fixtures().join("gaussian_pair.json").to_str().unwrap(),
        "--qstar",
        qstar_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(st.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    let cert = read_json(&out.join("cert.json"));
    assert!(cert["trj2_bound"].is_null());
    assert!(cert["trj2_gate_failure"].as_str().unwrap().contains("symmetry"));
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["status"], "gate");
}

#[test]
fn solve_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let model = fixtures().join("quartic_chain.json");
    let mut bytes = Vec::new();
    for run_dir in ["a", "b"] {
        let out = dir.path().join(run_dir);
        let st = run(&[
            "solve",
            "--model",
            model.to_str().unwrap(),
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(st.status.success());
        bytes.push(fs::read(out.join("qstar.json")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1], "identical config+seed must give identical artifacts");
}

#[test]
fn brute_reports_gaussian_truth() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let st = run(&[
        "brute",
        "--model",
        fixtures().join("quadratic_pair.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(st.status.success());
    let truth = read_json(&out.join("truth.json"));
    assert!((truth["logz"].as_f64().unwrap() - 1.4913035).abs() < 1e-6);
    assert!((truth["gaussian"]["rf_exact"].as_f64().unwrap() - 0.0588915).abs() < 1e-6);
}

#[test]
fn brute_refuses_large_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("big.json");
    let rows: Vec<Vec<f64>> = (0..5)
        .map(|i| (0..5).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    fs::write(
        &model,
        serde_json::to_string(&serde_json::json!({"type": "quadratic", "A": rows})).unwrap(),
    )
    .unwrap();
    let out = dir.path().join("out");
    let st = run(&["brute", "--model", model.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(st.status.code(), Some(1));
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["error_code"], "E_DIMENSION_TOO_LARGE");
}

#[test]
fn limit_scalar_and_block_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scalar");
    let st = run(&[
        "limit",
        "--model",
        fixtures().join("scalar_limit.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(st.status.success());
    let lim = read_json(&out.join("limit.json"));
    assert!((lim["value"].as_f64().unwrap() - 0.5723649).abs() < 1e-5);

    let out_b = dir.path().join("block");
    let st = run(&[
        "limit",
        "--model",
        fixtures().join("block_limit.json").to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
    ]);
    assert!(st.status.success());
    let lim = read_json(&out_b.join("limit.json"));
    assert_eq!(lim["mode"], "block");
    assert!(lim["restart_spread"].as_f64().unwrap() < 1e-5);
}

#[test]
fn sample_writes_binary_container() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let st = run(&[
        "sample",
        "--model",
        fixtures().join("quadratic_pair.json").to_str().unwrap(),
        "--opts",
        fixtures().join("chain_small.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    let bytes = fs::read(out.join("samples.bin")).unwrap();
    assert_eq!(&bytes[0..8], b"MFCSAMP1");
    let n_draws = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let n = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    assert_eq!(n, 2);
    assert_eq!(n_draws, (4000 - 1000) * 2);
    assert_eq!(bytes.len() as u64, 24 + n_draws * n * 8);
    // All payload values parse as finite f64.
    let first = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
    assert!(first.is_finite());
}

#[test]
fn control_pipeline_reports_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let st = run(&[
        "control",
        "--problem",
        fixtures().join("control_coupled.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["ordering_ok"], true);
    assert!((report["v_dstr"].as_f64().unwrap() - (-0.2027325)).abs() < 1e-4);
}

#[test]
fn accept_gaussian_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let st = run(&["accept", "gaussian", "--out", out.to_str().unwrap()]);
    assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    let report = read_json(&out.join("acceptance-report.json"));
    let checks = report.as_array().unwrap();
    assert!(!checks.is_empty());
    assert!(checks.iter().all(|c| c["passed"] == true));
    let stdout = String::from_utf8_lossy(&st.stdout);
    assert!(stdout.contains("pass"));
}

#[test]
fn accept_unknown_suite_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let st = run(&["accept", "mystery", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(st.status.code(), Some(1));
}

#[test]
fn tilt_scalar_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("tilt_model.json");
    fs::write(
        &model,
        r#"{"type":"quadratic","A":[[1.0]],"b":[1.0],"c":-0.5}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let st = run(&[
        "tilt",
        "--model",
        model.to_str().unwrap(),
        "--t",
        "1.0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    let tilt = read_json(&out.join("tilt.json"));
    assert!((tilt["ystar"][0].as_f64().unwrap() - 0.5).abs() < 1e-8);
    assert!((tilt["value"].as_f64().unwrap() - (-0.75)).abs() < 1e-8);
}
