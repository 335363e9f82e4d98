use std::path::{Path, PathBuf};
use std::process::{Command, Output};

#[allow(dead_code)]
#[path = "../src/report.rs"]
mod report;

use cachevisor::attacks::Recovery;
use report::{Body, Report, Scenario};

fn cachevisor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cachevisor")).args(args).output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cachevisor-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

/// Parses a report and checks it re-serializes to the same text.
fn report(out: &Output) -> Report {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    let r: Report = serde_json::from_str(&text).unwrap_or_else(|e| panic!("{e}: {text}"));
    assert_eq!(serde_json::to_string_pretty(&r).unwrap() + "\n", text);
    r
}

#[test]
fn integrity_baseline_is_bypassed_and_countermeasures_hold() {
    for (cm, bypassed) in [("none", true), ("acpt", false), ("selective", false), ("flush", false), ("detect", false)] {
        let out = cachevisor(&["run-attack", "integrity", "--countermeasure", cm]);
        assert_eq!(out.status.code(), Some(0), "{cm}");
        let r = report(&out);
        assert!(r.expected);
        let Body::Integrity { outcome } = r.body else { panic!("wrong body") };
        assert_eq!(outcome.bypassed, bypassed, "{cm}");
    }
}

#[test]
fn check_props_is_byte_identical_across_runs() {
    let args = ["check-props", "all", "--seed", "7", "--seeds", "2", "--steps", "300"];
    let a = cachevisor(&args);
    let b = cachevisor(&args);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stdout));
    assert_eq!(a.stdout, b.stdout);
    let r = report(&a);
    let Body::CheckProps { checks } = r.body else { panic!("wrong body") };
    // derivability, refcount, cache lemmas, two noninterference checks and five obligation modes
    assert_eq!(checks.len(), 2 * 10);
    assert!(checks.iter().all(|c| c.passed));

    let path = scratch("props.json");
    let c = cachevisor(&[&args[..], &["--out", path.to_str().unwrap()]].concat());
    assert_eq!(c.status.code(), Some(0));
    assert!(c.stdout.is_empty());
    assert_eq!(std::fs::read(&path).unwrap(), a.stdout);
}

#[test]
fn aes_extraction_and_offline_analysis_agree() {
    let log = scratch("aes.log");
    let out = cachevisor(&[
        "run-attack",
        "aes-extract",
        "--encryptions",
        "5000",
        "--seed",
        "1",
        "--log-out",
        log.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let Body::AesExtract { extraction } = report(&out).body else { panic!("wrong body") };
    assert!(extraction.success);
    assert_eq!(extraction.bytes_recovered, 16);

    let out = cachevisor(&["analyze-log", log.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let Body::AnalyzeLog { entries, recovery } = report(&out).body else { panic!("wrong body") };
    assert_eq!(entries, extraction.encryptions_used);
    assert!(matches!(recovery, Recovery::Recovered { .. }));

    // Under a full flush the attack is expected to fail.
    let out = cachevisor(&["run-attack", "aes-extract", "--encryptions", "200", "--countermeasure", "flush"]);
    assert_eq!(out.status.code(), Some(0));
    let Body::AesExtract { extraction } = report(&out).body else { panic!("wrong body") };
    assert!(!extraction.success);
}

#[test]
fn shipped_scenarios_run_as_documented() {
    let out = cachevisor(&["run-scenario", scenarios().join("wx.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert!(r.config.monitor);
    let Body::Scenario { steps, invariant_failures } = r.body else { panic!("wrong body") };
    assert_eq!(invariant_failures, 0);
    assert_eq!(steps.len(), 7);

    let out = cachevisor(&["run-scenario", scenarios().join("integrity_acpt.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(matches!(report(&out).body, Body::Integrity { .. }));
}

#[test]
fn scenario_documents_round_trip() {
    for name in ["wx.json", "integrity_acpt.json"] {
        let text = std::fs::read_to_string(scenarios().join(name)).unwrap();
        let sc: Scenario = serde_json::from_str(&text).unwrap();
        let again: Scenario = serde_json::from_str(&serde_json::to_string(&sc).unwrap()).unwrap();
        assert_eq!(sc, again);
    }
}

#[test]
fn demo_spawn_reports_refcount_trace() {
    let out = cachevisor(&["demo-spawn", "--countermeasure", "selective"]);
    assert_eq!(out.status.code(), Some(0));
    let Body::DemoSpawn { spawn } = report(&out).body else { panic!("wrong body") };
    assert_eq!(spawn.rc_trace, [0, 1, 0]);
}

#[test]
fn exit_codes() {
    // Unexpected outcome: a log with no observations recovers nothing.
    let empty = scratch("empty.log");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(cachevisor(&["analyze-log", empty.to_str().unwrap()]).status.code(), Some(1));

    // Usage and configuration errors.
    let bad = scratch("bad.json");
    std::fs::write(&bad, r#"{ "ops": [], "colour": 3 }"#).unwrap();
    let typo = scratch("typo.json");
    std::fs::write(&typo, r#"{ "config": { "countermeasur": "acpt" } }"#).unwrap();
    for args in [
        vec!["run-attack", "integrity", "--cache-sets", "100"],
        vec!["run-attack", "nothing"],
        vec!["frobnicate"],
        vec!["run-scenario", "/nonexistent/scenario.json"],
        vec!["run-scenario", bad.to_str().unwrap()],
        vec!["run-scenario", typo.to_str().unwrap()],
        vec!["check-props", "all", "--seeds", "0"],
    ] {
        let out = cachevisor(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}
