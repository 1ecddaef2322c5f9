//! Tables to frozen protocol to prequential report, all on the mock backend.

use std::sync::Arc;

use serde_json::json;

use careloop_core::agents::{AgentConfig, Engine};
use careloop_core::backend::{Metered, MockBackend, MockEntry, MockScript, TemplateId};
use careloop_core::bundler::{serialize_stay, BundlerConfig, SerializedStream};
use careloop_core::corpus::{corpus_bytes, corpus_digest, read_corpus_jsonl};
use careloop_core::eval::{prequential_run, EvalError, EvalOptions};
use careloop_core::ingest::{parse_tables, SchemaMap, TableInput, TableKind};
use careloop_core::memory::GlobalProtocol;
use careloop_core::reflector::{phase1_run, Phase1Config};
use careloop_core::synth;

const LABS: &str = "stay_id,charttime,label,valuenum,ref_range_lower,ref_range_upper
s-a,2024-01-01T08:00:00,Glucose,250,70,140
s-b,2024-01-02T08:00:00,Glucose,95,70,140
";
const MEDS: &str = "stay_id,drug,dose,route,starttime,stoptime
s-a,insulin regular,4 units,SC,2024-01-01T09:10:00,2024-01-01T20:00:00
s-b,acetaminophen,650 mg,PO,2024-01-02T09:00:00,
";

fn corpus() -> Vec<SerializedStream> {
    let report = parse_tables(
        &[TableInput::csv(TableKind::Labs, LABS.as_bytes()), TableInput::csv(TableKind::Medications, MEDS.as_bytes())],
        &SchemaMap::default(),
    );
    assert!(report.row_errors.is_empty() && report.table_errors.is_empty());
    assert_eq!(report.event_count(), 5);
    let streams: Vec<SerializedStream> = report
        .events
        .iter()
        .map(|(stay, events)| serialize_stay(stay.clone(), events, &BundlerConfig::default()).unwrap())
        .collect();
    let back = read_corpus_jsonl(corpus_bytes(&streams).as_slice()).unwrap();
    assert_eq!(back, streams);
    back
}

fn script(with_failure_rule: bool) -> MockScript {
    let mut entries = vec![
        MockEntry::reply(
            TemplateId::Reasoner,
            &["[LABS]\nCMP: All Normal"],
            json!({"predicted_actions": ["Start acetaminophen 650 mg PO"], "citations": []}),
        ),
        MockEntry::fallback(TemplateId::Reasoner, json!({"predicted_actions": ["Glucose"], "citations": []})),
        MockEntry::fallback(TemplateId::Steward, json!({})),
    ];
    if with_failure_rule {
        entries.push(MockEntry::reply(
            TemplateId::Reflector,
            &["Glucose: 250 (High)"],
            json!({
                "error_analysis": "Hyperglycemia left untreated.",
                "proposed_rule": {
                    "category": "ENDOCRINE_MGMT",
                    "trigger_condition": "Blood Glucose > 180 mg/dL",
                    "action_directive": "Initiate sliding scale insulin protocol",
                    "rule_text": "IF Glucose > 180 mg/dL THEN initiate sliding scale insulin."
                }
            }),
        ));
    }
    MockScript::new(entries)
}

#[test]
fn single_failure_induces_one_frozen_rule() {
    let corpus = corpus();
    let mut hashes = Vec::new();
    for _ in 0..2 {
        let mock = MockBackend::new(script(true));
        let engine = Engine::new(&mock, AgentConfig::default()).unwrap();
        let out = phase1_run(&corpus, &engine, GlobalProtocol::new(), &Phase1Config::default()).unwrap();
        assert_eq!(out.failures, 1);
        assert_eq!(out.protocol.len(), 1);
        assert!(out.protocol.is_frozen());
        assert_eq!(out.protocol.get("ENDOCRINE_MGMT_001").unwrap().trigger_condition, "Blood Glucose > 180 mg/dL");
        assert_eq!(out.log.len(), 1);
        assert!(out.log[0].admitted);
        hashes.push(out.protocol.version_hash().to_string());
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn perfect_predictions_induce_nothing() {
    let corpus = corpus();
    let exact = MockScript::new(vec![
        MockEntry::reply(
            TemplateId::Reasoner,
            &["[LABS]\nGlucose: 250 (High)"],
            json!({"predicted_actions": ["Start insulin regular 4 units SC"], "citations": []}),
        ),
        MockEntry::reply(
            TemplateId::Reasoner,
            &["[LABS]\nCMP: All Normal"],
            json!({"predicted_actions": ["Start acetaminophen 650 mg PO"], "citations": []}),
        ),
    ]);
    let mock = Metered::new(MockBackend::new(exact));
    let engine = Engine::new(&mock, AgentConfig::default()).unwrap();
    let out = phase1_run(&corpus, &engine, GlobalProtocol::new(), &Phase1Config::default()).unwrap();
    assert_eq!(out.failures, 0);
    assert!(out.protocol.is_empty() && out.protocol.is_frozen());
    assert_eq!(mock.calls(TemplateId::Reflector), 0);
}

#[test]
fn induced_protocol_drives_evaluation() {
    let corpus = corpus();
    let mock = MockBackend::new(script(true));
    let engine = Engine::new(&mock, AgentConfig::default()).unwrap();
    let induced = phase1_run(&corpus, &engine, GlobalProtocol::new(), &Phase1Config::default()).unwrap();

    let unfrozen = Arc::new(GlobalProtocol::new());
    assert_eq!(
        prequential_run(&corpus, &engine, unfrozen, &EvalOptions::default()).unwrap_err(),
        EvalError::ProtocolNotFrozen
    );

    let metered = Metered::new(MockBackend::new(script(true)));
    let engine = Engine::new(&metered, AgentConfig::default()).unwrap();
    let out = prequential_run(&corpus, &engine, Arc::new(induced.protocol), &EvalOptions::default()).unwrap();
    assert_eq!(metered.calls(TemplateId::Reflector), 0);
    assert_eq!(out.report.steps, 5);
    assert_eq!(out.report.skipped_empty_truth, 3);
    assert_eq!(out.report.scored_steps, 2);
    // s-a misses the insulin start, s-b gets acetaminophen right.
    let med = out.report.recall_at_5.values().copied().collect::<Vec<_>>();
    assert_eq!(med, vec![0.5]);
    assert_eq!(out.traces[0].activated_rule_ids, vec!["ENDOCRINE_MGMT_001".to_string()]);
    assert_eq!(out.report.adherence, Some(0.0));
}

#[test]
fn sharded_phase1_merges_by_dedup() {
    let fixture = synth::glucose_fixture(20);
    let run = |workers| {
        let mock = MockBackend::new(fixture.script.clone());
        let engine = Engine::new(&mock, AgentConfig::default()).unwrap();
        let cfg = Phase1Config {
            workers,
            ..Phase1Config::default()
        };
        phase1_run(&fixture.corpus, &engine, GlobalProtocol::new(), &cfg).unwrap()
    };
    let (serial, sharded, again) = (run(1), run(3), run(3));
    assert_eq!(serial.protocol.len(), sharded.protocol.len());
    assert_eq!(sharded.protocol.to_json(), again.protocol.to_json());
    assert_eq!(serial.log.len(), sharded.log.len());
}

#[test]
fn corpus_digest_is_stable() {
    assert_eq!(corpus_digest(&corpus()), corpus_digest(&corpus()));
}
