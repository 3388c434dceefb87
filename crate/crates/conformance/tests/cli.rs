// SPDX-License-Identifier: Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

fn tmmctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmmctl")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn demo() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios/demo.json")
        .display()
        .to_string()
}

#[test]
fn conformance_filter_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let o = tmmctl(&["--report", report.to_str().unwrap(), "conformance", "--filter", "ttt-levels"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["cases"].as_array().unwrap().len(), 3);
    assert_eq!(v["failed"], 0);
}

#[test]
fn injected_fault_fails_conformance() {
    let o = tmmctl(&["conformance", "--filter", "ici-zero-on-destroy", "--skip-zero-on-destroy"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn benches_pass() {
    let o = tmmctl(&["bench", "all"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn run_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let o = tmmctl(&["--trace", trace.to_str().unwrap(), "run", &demo(), "--policy", "dynamic"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = std::fs::read_to_string(&trace).unwrap();
    assert!(text.lines().count() > 10);
    for line in text.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
}

#[test]
fn bad_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"cvms\": [{\"vcpus\": 3}]}").unwrap();
    let o = tmmctl(&["run", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("vcpus"));
    assert_eq!(tmmctl(&["bench", "nope"]).status.code(), Some(2));
}

#[test]
fn small_fuzz_run() {
    let o = tmmctl(&["fuzz", "--sequences", "500", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 violations"));
}

#[test]
fn issue_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let token = dir.path().join("token.bin");
    let report = dir.path().join("issued.json");
    let challenge = "11".repeat(64);
    let o = tmmctl(&[
        "--report",
        report.to_str().unwrap(),
        "attest",
        "issue",
        "--challenge",
        &challenge,
        "--scenario",
        &demo(),
        "--out",
        token.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let rak = v["rak_public"].as_str().unwrap().to_string();
    let measurement = v["measurement"].as_str().unwrap().to_string();
    let t = token.to_str().unwrap();

    let ok = tmmctl(&["attest", "verify", t, &rak, "--measurement", &measurement, "--challenge", &challenge]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert_eq!(tmmctl(&["attest", "verify", t, &rak]).status.code(), Some(0));

    let wrong = "22".repeat(64);
    let no = tmmctl(&["attest", "verify", t, &rak, "--measurement", &measurement, "--challenge", &wrong]);
    assert_eq!(no.status.code(), Some(1));
    assert!(stdout(&no).contains("Reject"));

    let mut bytes = std::fs::read(&token).unwrap();
    bytes[40] ^= 0x80;
    std::fs::write(&token, bytes).unwrap();
    assert_eq!(tmmctl(&["attest", "verify", t, &rak]).status.code(), Some(1));
}
