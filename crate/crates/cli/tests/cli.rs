//! End-to-end runs of the `careloop` binary on the shipped demo data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn demo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo")
}

fn careloop(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_careloop"))
        .args(args)
        .current_dir(dir)
        .env_remove("CARELOOP_LOG")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn synth_into(dir: &Path, name: &str) -> PathBuf {
    ok(&careloop(dir, &["synth", "--out", name]));
    dir.join(name)
}

#[test]
fn synth_is_reproducible_and_matches_shipped_demo() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth_into(tmp.path(), "a");
    let b = synth_into(tmp.path(), "b");
    let manifest = json(&a.join("manifest.json"));
    let outputs: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(outputs.len(), 9);
    for name in outputs {
        let bytes = fs::read(a.join(name)).unwrap();
        assert_eq!(bytes, fs::read(b.join(name)).unwrap(), "{name} differs between runs");
        assert_eq!(bytes, fs::read(demo().join("synth").join(name)).unwrap(), "{name} differs from demo/synth");
    }
    let other = tmp.path().join("c");
    ok(&careloop(tmp.path(), &["synth", "--seed", "7", "--out", "c"]));
    assert_ne!(fs::read(a.join("events.jsonl")).unwrap(), fs::read(other.join("events.jsonl")).unwrap());
}

#[test]
fn demo_tables_bundle_to_hand_counted_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let tables = demo().join("tables");
    let t = |name: &str| tables.join(name).display().to_string();
    let (labs, meds, dx, px) = (t("labs.csv"), t("medications.csv"), t("diagnoses.csv"), t("procedures.csv"));
    ok(&careloop(
        tmp.path(),
        &["ingest", "--labs", &labs, "--medications", &meds, "--diagnoses", &dx, "--procedures", &px, "--out", "ing"],
    ));
    let ing = json(&tmp.path().join("ing/manifest.json"));
    assert_eq!(ing["summary"]["events"], 10);
    assert_eq!(ing["summary"]["row_errors"].as_array().unwrap().len(), 0);
    assert_eq!(ing["inputs"].as_object().unwrap().len(), 4);

    ok(&careloop(tmp.path(), &["bundle", "--events", "ing/events.jsonl", "--out", "bun"]));
    let stats = json(&tmp.path().join("bun/stats.json"));
    // icu-a: {dx, lactate, creatinine, intubation} {norepi start, stop} {lactate after 8 h}
    // icu-b: {dx, potassium, calcium gluconate}
    assert_eq!(stats["stays"], 2);
    assert_eq!(stats["bundles"], 4);
    assert_eq!(stats["events"], 10);
    assert_eq!(stats["events_per_bundle"], 2.5);
    assert_eq!(stats["kind_per_bundle"]["LabResult"], 1.0);
    assert_eq!(stats["kind_per_bundle"]["MedicationStop"], 0.25);
    let corpus = fs::read_to_string(tmp.path().join("bun/corpus.jsonl")).unwrap();
    assert_eq!(corpus.matches("[TIME_DELTA: +8 hours]").count(), 2, "gap token in field and text");
    assert!(corpus.contains("CMP: All Normal"));
    let manifest = json(&tmp.path().join("bun/manifest.json"));
    assert_eq!(manifest["corpus_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn sepsis_replay_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth_into(tmp.path(), "d");
    let out = ok(&careloop(
        &d,
        &[
            "eval",
            "--config",
            "sepsis.toml",
            "--mock-script",
            "mock_script.jsonl",
            "--corpus",
            "sepsis_corpus.jsonl",
            "--protocol",
            "sepsis_protocol.json",
            "--out",
            "../e",
        ],
    ));
    assert!(out.contains("Adherence"));
    let report = json(&tmp.path().join("e/report.json"));
    assert_eq!(report["steps"], 4);
    assert_eq!(report["adherence"], 1.0);
    assert_eq!(report["recall_at_5"]["Medication"], 1.0);
    let manifest = json(&tmp.path().join("e/manifest.json"));
    assert_eq!(manifest["summary"]["certified_steps"], 4);
    assert_eq!(manifest["calls"].get("Reflector"), None);
    let traces = fs::read_to_string(tmp.path().join("e/traces.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), 4);
}

#[test]
fn phase1_then_eval_respects_the_training_guard() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth_into(tmp.path(), "d");
    ok(&careloop(&d, &["phase1", "--mock-script", "glucose_mock.jsonl", "--corpus", "glucose_corpus.jsonl", "--out", "../p"]));
    let p = json(&tmp.path().join("p/manifest.json"));
    assert_eq!(p["summary"]["rules"], 8);
    let listing = ok(&careloop(tmp.path(), &["inspect", "--protocol", "p/protocol.json"]));
    assert!(listing.contains("rules=8  frozen=true"));
    assert!(listing.contains("ENDOCRINE_MGMT (8)"));

    let same = careloop(
        &d,
        &["eval", "--mock-script", "mock_script.jsonl", "--corpus", "glucose_corpus.jsonl", "--protocol", "../p/protocol.json", "--out", "../x"],
    );
    assert_eq!(same.status.code(), Some(4));
    assert!(!tmp.path().join("x").exists());

    ok(&careloop(
        &d,
        &["eval", "--mock-script", "mock_script.jsonl", "--corpus", "corpus.jsonl", "--protocol", "../p/protocol.json", "--out", "../y"],
    ));
    let report = json(&tmp.path().join("y/report.json"));
    assert_eq!(report["steps"], 47);
}

#[test]
fn unfrozen_protocol_and_bad_config_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth_into(tmp.path(), "d");
    let text = fs::read_to_string(d.join("sepsis_protocol.json")).unwrap();
    let mut proto: Value = serde_json::from_str(&text).unwrap();
    proto["frozen"] = Value::Bool(false);
    fs::write(d.join("open.json"), serde_json::to_string(&proto).unwrap()).unwrap();
    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--mock-script", "mock_script.jsonl", "--corpus", "sepsis_corpus.jsonl", "--out", "../z"];
        args.extend_from_slice(extra);
        careloop(&d, &args)
    };
    assert_eq!(eval(&["--protocol", "open.json"]).status.code(), Some(3));

    fs::write(d.join("bad.toml"), "[agents]\ntau_uncertainty = -2.0\n").unwrap();
    assert_eq!(eval(&["--protocol", "sepsis_protocol.json", "--config", "bad.toml"]).status.code(), Some(2));
    fs::write(d.join("typo.toml"), "[agent]\nl_limit = 3\n").unwrap();
    assert_eq!(eval(&["--protocol", "sepsis_protocol.json", "--config", "typo.toml"]).status.code(), Some(2));

    let env = Command::new(env!("CARGO_BIN_EXE_careloop"))
        .args(["eval", "--mock-script", "mock_script.jsonl", "--corpus", "sepsis_corpus.jsonl", "--protocol", "sepsis_protocol.json", "--out", "../z"])
        .current_dir(&d)
        .env("CARELOOP_WORKERS", "0")
        .output()
        .unwrap();
    assert_eq!(env.status.code(), Some(2));
    assert!(!tmp.path().join("z").exists());
}

#[test]
fn env_layer_reaches_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth_into(tmp.path(), "d");
    let out = Command::new(env!("CARGO_BIN_EXE_careloop"))
        .args(["eval", "--config", "sepsis.toml", "--mock-script", "mock_script.jsonl", "--corpus", "sepsis_corpus.jsonl"])
        .args(["--protocol", "sepsis_protocol.json", "--out", "../e"])
        .current_dir(&d)
        .env("CARELOOP_AGENTS__TAU_UNCERTAINTY", "0.25")
        .env("CARELOOP_WORKERS", "3")
        .output()
        .unwrap();
    ok(&out);
    let m = json(&tmp.path().join("e/manifest.json"));
    assert_eq!(m["config"]["agents"]["tau_uncertainty"], 0.25);
    assert_eq!(m["config"]["agents"]["l_limit"], 0, "file layer kept");
    assert_eq!(m["config"]["workers"], 3);
}

#[test]
fn outputs_are_not_replaced_without_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth_into(tmp.path(), "d");
    fs::write(d.join("keep.txt"), "x").unwrap();
    let again = careloop(tmp.path(), &["synth", "--out", "d"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(d.join("keep.txt").exists());

    ok(&careloop(tmp.path(), &["synth", "--out", "d", "--overwrite", "--stays", "2"]));
    assert!(!d.join("keep.txt").exists());
    assert_eq!(json(&d.join("manifest.json"))["summary"]["stays"], 3);
    let leftovers: Vec<_> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with('.'))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn mock_backend_without_script_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth_into(tmp.path(), "d");
    let out = careloop(&d, &["phase1", "--corpus", "glucose_corpus.jsonl", "--out", "../p"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mock-script"));
}
