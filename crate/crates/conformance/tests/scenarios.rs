// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};

use tmm_conformance::run::{run_scenario, RunOptions};
use tmm_conformance::scenario::{ParseError, Scenario};
use tmm_sim::mem::MappingPolicy;

fn dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn load(name: &str) -> Scenario {
    Scenario::load(&dir().join(name)).unwrap()
}

fn report_text(s: &Scenario) -> (String, String) {
    let out = run_scenario(s, &RunOptions::default()).unwrap();
    (serde_json::to_string_pretty(&out.report).unwrap() + "\n", out.trace_jsonl())
}

/// Compares against the frozen file; `UPDATE_GOLDEN=1` rewrites it.
fn golden(name: &str, actual: &str) {
    let path = dir().join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let want = std::fs::read_to_string(&path).unwrap();
    if want != actual {
        let line = want
            .lines()
            .zip(actual.lines())
            .position(|(a, b)| a != b)
            .unwrap_or(want.lines().count().min(actual.lines().count()));
        panic!("{name} differs from the golden copy at line {}", line + 1);
    }
}

#[test]
fn every_scenario_passes_under_both_policies() {
    for entry in std::fs::read_dir(dir()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if !name.ends_with(".json") || name.ends_with(".report.json") {
            continue;
        }
        let s = Scenario::load(&path).unwrap();
        for policy in [MappingPolicy::Direct, MappingPolicy::Dynamic] {
            let opts = RunOptions {
                policy: Some(policy),
                ..RunOptions::default()
            };
            let r = run_scenario(&s, &opts).unwrap().report;
            assert!(r.passed, "{name} {policy:?}: {:?}", r.failures);
        }
    }
}

#[test]
fn demo_is_deterministic() {
    let s = load("demo.json");
    assert_eq!(report_text(&s), report_text(&s));
}

#[test]
fn demo_matches_golden_report_and_trace() {
    let (report, trace) = report_text(&load("demo.json"));
    golden("demo.report.json", &report);
    golden("demo.trace.jsonl", &trace);
}

#[test]
fn seed_changes_keys_not_outcome() {
    let s = load("demo.json");
    let other = RunOptions {
        seed: Some(99),
        ..RunOptions::default()
    };
    let a = run_scenario(&s, &RunOptions::default()).unwrap().report;
    let b = run_scenario(&s, &other).unwrap().report;
    assert!(a.passed && b.passed);
    assert_eq!(a.cvms[0].measurement, b.cvms[0].measurement);
    assert_ne!(a.seed, b.seed);
}

#[test]
fn unmet_expectation_fails_the_run() {
    let mut s = load("demo.json");
    s.expect[0].marks = Some(vec![1, 2, 4]);
    let r = run_scenario(&s, &RunOptions::default()).unwrap().report;
    assert!(!r.passed);
    assert_eq!(r.failures.len(), 1, "{:?}", r.failures);
}

#[test]
fn parse_errors_name_the_field() {
    let text = std::fs::read_to_string(dir().join("demo.json")).unwrap();
    let broken = text.replacen("\"blk\"", "\"disk\"", 1);
    match Scenario::parse(&broken) {
        Err(ParseError::Syntax { field, .. }) => assert!(field.contains("devices"), "{field}"),
        other => panic!("{other:?}"),
    }
}
