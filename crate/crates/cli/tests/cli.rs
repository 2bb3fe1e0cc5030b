use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

use longitrack_core::harness::load_manifest;
use longitrack_core::nifti::read_field;
use longitrack_core::CaseKind;

fn longitrack(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_longitrack")).args(args).env("RUST_LOG", "warn").output().unwrap();
    out
}

fn ok(args: &[&str]) -> String {
    let out = longitrack(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path, n: &str, amb: &str) {
    ok(&["generate", "--n-cases", n, "--shape", "24,24,24", "--seed", "5", "--ambiguity", amb, "--max-lesions", "2", "--out", p(dir)]);
}

fn tiny_train_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "net": { "n_levels": 3, "base_channels": 4, "max_channels": 8, "voi_size": [16, 16, 16] },
        "train": { "epochs": 1, "seed": 3, "samples_per_epoch": 4 }
    });
    let path = dir.join("train.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn generate_writes_flagged_ambiguity_cases() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "3", "2");
    let cases = load_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(cases.len(), 5);
    assert_eq!(cases.iter().filter(|c| c.kind == CaseKind::Ambiguity).count(), 2);
    let raw: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(raw["cases"][4]["kind"], "ambiguity");

    let again = tempfile::tempdir().unwrap();
    generate(again.path(), "3", "2");
    assert_eq!(load_manifest(&again.path().join("manifest.json")).unwrap(), cases);
}

#[test]
fn bad_shape_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = longitrack(&["generate", "--n-cases", "1", "--shape", "24,24", "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Z,Y,X"));
}

#[test]
fn register_writes_fields_and_proposals() {
    let data = tempfile::tempdir().unwrap();
    generate(data.path(), "2", "0");
    let out = tempfile::tempdir().unwrap();
    ok(&["register", "--data", p(data.path()), "--method", "truth", "--error-vox", "1.5", "--out", p(out.path())]);
    let proposals: Value = serde_json::from_str(&std::fs::read_to_string(out.path().join("proposals.json")).unwrap()).unwrap();
    let rows = proposals.as_array().unwrap();
    assert!(!rows.is_empty());
    for r in rows {
        assert!((r["residual_error_vox"].as_f64().unwrap() - 1.5).abs() < 1e-9);
        let field = read_field(out.path().join(r["field"].as_str().unwrap())).unwrap();
        assert_eq!(field.shape(), [24, 24, 24]);
    }
}

#[test]
fn train_predict_evaluate_round_trip() {
    let data = tempfile::tempdir().unwrap();
    generate(data.path(), "3", "1");
    let work = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(work.path());
    let ckpt = work.path().join("model.bin");
    let log = ok(&["train", "--config", p(&cfg), "--data", p(data.path()), "--out", p(&ckpt)]);
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0]["seed"], 3);
    assert_eq!(records[1]["epoch"], 0);
    assert!(records[1]["train_loss"].as_f64().unwrap().is_finite());

    let pred = work.path().join("pred");
    ok(&["predict", "--model", p(&ckpt), "--data", p(data.path()), "--out", p(&pred)]);
    let report_path = work.path().join("report.json");
    let table = ok(&["evaluate", "--pred", p(&pred), "--gt", p(data.path()), "--tolerance-mm", "1.5", "--n-bootstrap", "50", "--out", p(&report_path)]);
    assert!(table.starts_with("DSC"));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["nsd_tolerance_mm"], 1.5);
    assert_eq!(report["n_bootstrap"], 50);
    let n_lesions: usize = load_manifest(&data.path().join("manifest.json")).unwrap().iter().map(|c| c.lesion_ids().len()).sum();
    assert_eq!(report["per_lesion"].as_array().unwrap().len(), n_lesions);
}

#[test]
fn evaluate_scores_ground_truth_as_perfect() {
    let data = tempfile::tempdir().unwrap();
    generate(data.path(), "2", "1");
    let pred = tempfile::tempdir().unwrap();
    for c in load_manifest(&data.path().join("manifest.json")).unwrap() {
        longitrack_core::nifti::write_mask(pred.path().join(format!("{}.nii.gz", c.case_id)), &c.followup.mask, c.followup.volume.spacing()).unwrap();
    }
    let out = tempfile::tempdir().unwrap();
    let report_path = out.path().join("r.json");
    ok(&["evaluate", "--pred", p(pred.path()), "--gt", p(data.path()), "--out", p(&report_path)]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["dsc_mean"], 1.0);
    assert_eq!(report["nsd_mean"], 1.0);
    assert_eq!(report["ldr"], 1.0);
    assert_eq!(report["nsd_tolerance_mm"], 2.0);
}

#[test]
fn evaluate_reports_missing_prediction() {
    let data = tempfile::tempdir().unwrap();
    generate(data.path(), "1", "0");
    let empty = tempfile::tempdir().unwrap();
    let out = longitrack(&["evaluate", "--pred", p(empty.path()), "--gt", p(data.path()), "--out", p(&empty.path().join("r.json"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("case_0000"));
}

#[test]
fn ablate_writes_table_and_provenance() {
    let work = tempfile::tempdir().unwrap();
    let spec = serde_json::json!({
        "dataset": { "n_cases": 6, "shape": [24, 24, 24], "seed": 2, "ambiguity_fraction": 0.34, "max_lesions": 1 },
        "rows": [{ "name": "single", "fusion_mode": "single_timepoint", "prompt_sim": true, "pretrain": false }],
        "error_vox": [0.0, 2.0],
        "net": { "n_levels": 3, "base_channels": 4, "max_channels": 8, "voi_size": [16, 16, 16] },
        "train": { "epochs": 1, "samples_per_epoch": 2 },
        "eval": { "n_bootstrap": 20 }
    });
    let spec_path = work.path().join("spec.json");
    std::fs::write(&spec_path, spec.to_string()).unwrap();
    let out = work.path().join("results");
    let table = ok(&["ablate", "--spec", p(&spec_path), "--out", p(&out)]);
    assert!(table.contains("single"));
    assert_eq!(std::fs::read_to_string(out.join("table.txt")).unwrap(), table);
    let results: Value = serde_json::from_str(&std::fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    let prov = &results["rows"][0]["provenance"];
    assert!(prov["config_hash"].as_str().is_some_and(|h| !h.is_empty()));
    assert!(prov["dataset_hash"].as_str().is_some_and(|h| !h.is_empty()));
}

fn http(port: u16, method: &str, path: &str, body: &str) -> (u16, Value) {
    let mut s = TcpStream::connect(("127.0.0.1", port)).unwrap();
    write!(s, "{method} {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\nContent-Length: {}\r\n\r\n{body}", body.len()).unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    let status: u16 = raw.split_whitespace().nth(1).unwrap().parse().unwrap();
    let (head, payload) = raw.split_once("\r\n\r\n").unwrap();
    let payload = if head.to_ascii_lowercase().contains("transfer-encoding: chunked") { dechunk(payload) } else { payload.to_string() };
    (status, serde_json::from_str(&payload).unwrap_or(Value::Null))
}

fn dechunk(mut s: &str) -> String {
    let mut out = String::new();
    while let Some((len, rest)) = s.split_once("\r\n") {
        let n = usize::from_str_radix(len.trim(), 16).unwrap();
        if n == 0 {
            break;
        }
        out.push_str(&rest[..n]);
        s = &rest[n + 2..];
    }
    out
}

struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_completes_the_verification_loop() {
    let data = tempfile::tempdir().unwrap();
    generate(data.path(), "1", "0");
    let work = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(work.path());
    let ckpt = work.path().join("model.bin");
    ok(&["train", "--config", p(&cfg), "--data", p(data.path()), "--out", p(&ckpt)]);

    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let _server = Server(
        Command::new(env!("CARGO_BIN_EXE_longitrack"))
            .args(["serve", "--data", p(data.path()), "--model", p(&ckpt), "--port", &port.to_string()])
            .env("RUST_LOG", "warn")
            .spawn()
            .unwrap(),
    );
    let start = Instant::now();
    while TcpStream::connect(("127.0.0.1", port)).is_err() {
        assert!(start.elapsed() < Duration::from_secs(30), "server did not start");
        std::thread::sleep(Duration::from_millis(50));
    }

    let (s, cases) = http(port, "GET", "/cases", "");
    assert_eq!(s, 200);
    assert_eq!(cases[0]["case_id"], "case_0000");
    let (s, proposal) = http(port, "GET", "/cases/case_0000/lesions/1/proposal", "");
    assert_eq!(s, 200);
    let (s, session) = http(port, "POST", "/cases/case_0000/lesions/1/verify", "");
    assert_eq!(s, 200);
    assert_eq!(session["status"], "segmented");
    assert_eq!(session["verified"]["coord"], proposal["coord"]);
    let z = proposal["coord"][0].as_i64().unwrap();
    let (s, slice) = http(port, "GET", &format!("/cases/case_0000/slice?tp=followup&axis=z&index={z}"), "");
    assert_eq!(s, 200);
    assert!(slice["points"].as_array().unwrap().iter().any(|p| p["role"] == "verified"));
    let (_, list) = http(port, "GET", "/cases", "");
    let n_lesions = list[0]["lesion_count"].as_u64().unwrap();
    let expected = if n_lesions == 1 { "segmented" } else { "in_progress" };
    assert_eq!(list[0]["status"], expected);
}
