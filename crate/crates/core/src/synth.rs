//! Seeded synthetic corpora, scripted mock backends and fixtures: the
//! four-step sepsis trajectory, stationary streams of any length, random
//! corpora and trace sets, and a scripted 20-failure induction corpus.

use std::collections::BTreeMap;

use chrono::{Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::agents::{AgentConfig, AuditStatus, AuditVerdict, Prediction, RiskLevel, TriggerReason};
use crate::backend::{MockEntry, MockScript, TemplateId};
use crate::bundler::{serialize_stay, BundlerConfig, SerializedStream};
use crate::eval::{ActionCategory, StepTrace, TRACE_SCHEMA_VERSION};
use crate::ingest::{ClinicalEvent, MedPhase, StayId, Timestamp};
use crate::memory::{GlobalProtocol, GlobalRule, IndividualProtocol, Tokenizer};
use crate::reflector::ProposedRule;

pub const SEPSIS_STAY: &str = "demo-sepsis-01";

pub fn base_time() -> Timestamp {
    Utc.with_ymd_and_hms(2024, 1, 1, 8, 0, 0).unwrap()
}

fn hours(h: i64) -> Duration {
    Duration::hours(h)
}

/// Lactate, then fluids, cultures and antibiotics one hour apart.
pub fn sepsis_events() -> Vec<ClinicalEvent> {
    let s = StayId::from(SEPSIS_STAY);
    let t0 = base_time();
    vec![
        ClinicalEvent::lab(s.clone(), t0, "Lactate", 4.8, Some(0.5), Some(2.2)).unwrap(),
        ClinicalEvent::medication(s.clone(), t0 + hours(1), "IV fluids", "30 ml/kg", "", MedPhase::Start).unwrap(),
        ClinicalEvent::procedure(s.clone(), t0 + hours(2), "BLDCX", "Blood cultures").unwrap(),
        ClinicalEvent::medication(s, t0 + hours(3), "broad-spectrum antibiotics", "", "", MedPhase::Start).unwrap(),
    ]
}

pub fn sepsis_stream() -> SerializedStream {
    serialize_stay(StayId::from(SEPSIS_STAY), &sepsis_events(), &BundlerConfig::default()).expect("fixture bundles")
}

pub fn sepsis_rule() -> GlobalRule {
    GlobalRule::new(
        "SEPSIS_V1",
        "SEPSIS",
        "Lactate > 4 OR MAP < 65",
        "fluids + broad-spectrum antibiotics",
        "IF Lactate > 4 OR MAP < 65 THEN fluids + broad-spectrum antibiotics",
    )
    .expect("fixture rule")
}

/// The single-rule frozen protocol.
pub fn sepsis_protocol() -> GlobalProtocol {
    let mut p = GlobalProtocol::from_rules([sepsis_rule()]).expect("fixture protocol");
    p.freeze();
    p
}

/// Frozen protocol with a few extra rules for the random corpora.
pub fn demo_protocol() -> GlobalProtocol {
    let extra = [
        ("ENDOCRINE_MGMT_001", "ENDOCRINE_MGMT", "Glucose > 180", "Start insulin sliding scale", "IF Glucose > 180 mg/dL THEN start insulin sliding scale."),
        ("RENAL_001", "RENAL", "Creatinine > 2", "Hold nephrotoxic agents", "IF Creatinine > 2 THEN hold nephrotoxic agents and repeat BMP."),
        ("ELECTROLYTE_001", "ELECTROLYTE", "Potassium > 5.5", "Repeat potassium", "IF Potassium > 5.5 THEN repeat potassium and obtain ECG."),
        ("HEME_001", "HEME", "Hemoglobin < 7", "Transfuse packed red cells", "IF Hemoglobin < 7 THEN transfuse packed red cells."),
    ];
    let mut rules = vec![sepsis_rule()];
    for (id, cat, trig, act, text) in extra {
        rules.push(GlobalRule::new(id, cat, trig, act, text).expect("fixture rule"));
    }
    let mut p = GlobalProtocol::from_rules(rules).expect("fixture protocol");
    p.freeze();
    p
}

/// Steward on every step so each prediction sees the compressed state.
pub fn sepsis_config() -> AgentConfig {
    AgentConfig {
        l_limit: 0,
        ..AgentConfig::default()
    }
}

// Needles include the section heading so they only match bundle text, never
// the template boilerplate or the rendered state.
const E0: &str = "[LABS]\nLactate: 4.8 (High)";
const E1: &str = "[MEDICATIONS]\nStart IV fluids 30 ml/kg";
const E2: &str = "[PROCEDURES]\nBlood cultures";
const E3: &str = "[MEDICATIONS]\nStart broad-spectrum antibiotics";

/// Replies reproducing the stepwise sepsis execution. Later steps come first
/// because the Steward's prompt carries its prior state.
pub fn sepsis_script() -> MockScript {
    let reasoner = |needle: &str, ty: &str, actions: &[&str], thought: &str| {
        MockEntry::reply(
            TemplateId::Reasoner,
            &[needle],
            json!({
                "thought_process": thought,
                "next_bundle_type": ty,
                "predicted_actions": actions,
                "citations": ["R-SEPSIS_V1"],
            }),
        )
    };
    let steward = |needle: &str, state: Value| MockEntry::reply(TemplateId::Steward, &[needle], state);
    MockScript::new(vec![
        reasoner(E3, "LABS", &["Repeat lactate"], "Sepsis bundle complete per R-SEPSIS_V1; reassess lactate."),
        reasoner(E2, "MEDICATIONS", &["Start broad-spectrum antibiotics"], "Fluids given and cultures drawn; antibiotics outstanding per R-SEPSIS_V1."),
        reasoner(E1, "PROCEDURES", &["Blood cultures"], "Fluids started; cultures precede antibiotics under R-SEPSIS_V1."),
        reasoner(
            E0,
            "MEDICATIONS",
            &["Start IV fluids 30 ml/kg", "Start broad-spectrum antibiotics"],
            "Lactate 4.8 meets R-SEPSIS_V1.",
        ),
        steward(
            E3,
            json!({"current_meds": ["IV fluids", "broad-spectrum antibiotics"]}),
        ),
        steward(E2, json!({"procedures": ["blood cultures"]})),
        steward(E1, json!({"current_meds": ["IV fluids"]})),
        steward(
            E0,
            json!({"active_problems": ["suspected sepsis"], "current_meds": [], "trends": ["lactate high"]}),
        ),
        MockEntry::fallback(TemplateId::Auditor, json!({"status": "PASS", "critique": "", "risk_level": "LOW"})),
    ])
}

/// Fallback replies for every online role; used with the random corpora.
pub fn generic_script() -> MockScript {
    MockScript::new(vec![
        MockEntry::fallback(
            TemplateId::Reasoner,
            json!({
                "thought_process": "Trend follow-up.",
                "next_bundle_type": "LABS",
                "predicted_actions": ["Lactate", "Glucose", "Start heparin 5000 units SC"],
                "citations": ["R-SEPSIS_V1"],
            }),
        ),
        MockEntry::fallback(TemplateId::Router, json!({"selected_protocol_ids": ["SEPSIS_V1", "ENDOCRINE_MGMT_001", "RENAL_001"]})),
        MockEntry::fallback(TemplateId::Auditor, json!({"status": "PASS", "critique": "", "risk_level": "LOW"})),
        MockEntry::fallback(TemplateId::Steward, json!({"trends": ["stable"]})),
        MockEntry::fallback(TemplateId::Judge, json!({"score": 3})),
    ])
}

/// One period of the stationary stream: labs, start, procedure, stop.
fn stationary_cycle(s: &StayId, start: Timestamp) -> Vec<ClinicalEvent> {
    vec![
        ClinicalEvent::lab(s.clone(), start, "Lactate", 3.1, Some(0.5), Some(2.2)).unwrap(),
        ClinicalEvent::lab(s.clone(), start, "Glucose", 190.0, Some(70.0), Some(140.0)).unwrap(),
        ClinicalEvent::medication(s.clone(), start + hours(1), "heparin", "5000 units", "SC", MedPhase::Start).unwrap(),
        ClinicalEvent::procedure(s.clone(), start + hours(2), "BLDCX", "Blood cultures").unwrap(),
        ClinicalEvent::medication(s.clone(), start + hours(3), "heparin", "", "", MedPhase::Stop).unwrap(),
    ]
}

pub const STATIONARY_PERIOD: usize = 4;

/// `len` hourly bundles repeating a 4-bundle cycle.
pub fn stationary_stream(stay: &str, len: usize) -> SerializedStream {
    let s = StayId::from(stay);
    let cycles = len.div_ceil(STATIONARY_PERIOD);
    let events: Vec<ClinicalEvent> = (0..cycles)
        .flat_map(|c| stationary_cycle(&s, base_time() + hours((c * STATIONARY_PERIOD) as i64)))
        .collect();
    let mut stream = serialize_stay(s, &events, &BundlerConfig::default()).expect("stationary bundles");
    stream.bundles.truncate(len);
    stream.text_per_bundle.truncate(len);
    stream
}

/// An `l_limit` that flushes the buffer exactly once per cycle.
pub fn stationary_l_limit(stream: &SerializedStream, tok: &dyn Tokenizer) -> usize {
    let cycle: usize = stream.text_per_bundle.iter().take(STATIONARY_PERIOD).map(|t| tok.count(t)).sum();
    cycle.saturating_sub(1)
}

pub fn stationary_script() -> MockScript {
    MockScript::new(vec![
        MockEntry::fallback(
            TemplateId::Reasoner,
            json!({
                "thought_process": "Cycle continues.",
                "next_bundle_type": "MEDICATIONS",
                "predicted_actions": ["Start heparin 5000 units SC", "Lactate"],
                "citations": ["R-SEPSIS_V1", "S-01"],
            }),
        ),
        MockEntry::fallback(
            TemplateId::Steward,
            json!({
                "active_problems": ["suspected sepsis"],
                "current_meds": [],
                "procedures": ["blood cultures"],
                "trends": ["lactate high", "glucose high"],
            }),
        ),
        MockEntry::fallback(TemplateId::Auditor, json!({"status": "PASS", "critique": "", "risk_level": "LOW"})),
        MockEntry::fallback(TemplateId::Router, json!({"selected_protocol_ids": ["SEPSIS_V1"]})),
    ])
}

const LABS: &[(&str, f64, f64)] = &[
    ("Lactate", 0.5, 2.2),
    ("Glucose", 70.0, 140.0),
    ("Creatinine", 0.6, 1.3),
    ("Potassium", 3.5, 5.1),
    ("Sodium", 135.0, 145.0),
    ("WBC", 4.0, 11.0),
    ("Hemoglobin", 12.0, 17.5),
];
const DRUGS: &[(&str, &str, &str)] = &[
    ("heparin", "5000 units", "SC"),
    ("insulin regular", "4 units", "SC"),
    ("vancomycin", "1 g", "IV"),
    ("norepinephrine", "0.05 mcg/kg/min", "IV"),
    ("piperacillin-tazobactam", "4.5 g", "IV"),
    ("acetaminophen", "650 mg", "PO"),
];
const PROCEDURES: &[(&str, &str)] = &[
    ("BLDCX", "Blood cultures"),
    ("CXR", "Chest x-ray"),
    ("02HV33Z", "Central line placement"),
    ("5A1955Z", "Mechanical ventilation"),
];
const DIAGNOSES: &[(&str, &str)] = &[("A41.9", "Sepsis"), ("N17.9", "Acute kidney injury"), ("E11.65", "Hyperglycemia")];

fn random_event(rng: &mut ChaCha8Rng, s: &StayId, at: Timestamp, active: &mut Vec<usize>) -> ClinicalEvent {
    match rng.gen_range(0..10) {
        0..=4 => {
            let (name, lo, hi) = LABS[rng.gen_range(0..LABS.len())];
            let span = hi - lo;
            let value = ((lo - span * 0.5 + rng.gen::<f64>() * span * 2.0) * 10.0).round() / 10.0;
            ClinicalEvent::lab(s.clone(), at, name, value, Some(lo), Some(hi)).unwrap()
        }
        5 | 6 => {
            let i = rng.gen_range(0..DRUGS.len());
            let (drug, dose, route) = DRUGS[i];
            if let Some(pos) = active.iter().position(|&a| a == i) {
                active.remove(pos);
                ClinicalEvent::medication(s.clone(), at, drug, "", "", MedPhase::Stop).unwrap()
            } else {
                active.push(i);
                ClinicalEvent::medication(s.clone(), at, drug, dose, route, MedPhase::Start).unwrap()
            }
        }
        7 | 8 => {
            let (code, desc) = PROCEDURES[rng.gen_range(0..PROCEDURES.len())];
            ClinicalEvent::procedure(s.clone(), at, code, desc).unwrap()
        }
        _ => {
            let (code, desc) = DIAGNOSES[rng.gen_range(0..DIAGNOSES.len())];
            ClinicalEvent::diagnosis(s.clone(), at, code, desc).unwrap()
        }
    }
}

/// Sorted events spread over roughly `bundles` windows, with occasional
/// silent gaps long enough to produce time-delta tokens.
pub fn random_events(rng: &mut ChaCha8Rng, stay: &StayId, bundles: usize) -> Vec<ClinicalEvent> {
    let mut events = Vec::new();
    let mut active = Vec::new();
    let mut start = base_time();
    for _ in 0..bundles {
        let n = rng.gen_range(1..=4);
        let mut offsets: Vec<i64> = (0..n).map(|_| rng.gen_range(0..50)).collect();
        offsets.sort_unstable();
        for m in offsets {
            events.push(random_event(rng, stay, start + Duration::minutes(m), &mut active));
        }
        let gap = if rng.gen_bool(0.1) { rng.gen_range(7..15) } else { rng.gen_range(1..4) };
        start += hours(gap);
    }
    events
}

/// `stays` random stays, each with `min_bundles..=max_bundles` windows.
pub fn random_corpus(seed: u64, stays: usize, min_bundles: usize, max_bundles: usize, cfg: &BundlerConfig) -> Vec<SerializedStream> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..stays)
        .map(|i| {
            let stay = StayId(format!("syn-{i:04}"));
            let n = rng.gen_range(min_bundles..=max_bundles);
            let events = random_events(&mut rng, &stay, n);
            serialize_stay(stay, &events, cfg).expect("random bundles")
        })
        .collect()
}

/// Per-stay events for the demo: the sepsis trajectory plus `extra` random
/// stays.
pub fn demo_events(seed: u64, extra: usize) -> BTreeMap<StayId, Vec<ClinicalEvent>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::from([(StayId::from(SEPSIS_STAY), sepsis_events())]);
    for i in 0..extra {
        let stay = StayId(format!("syn-{i:04}"));
        let n = rng.gen_range(4..=10);
        let events = random_events(&mut rng, &stay, n);
        out.insert(stay, events);
    }
    out
}

/// Scripted induction corpus: each stay shows one high glucose and then an
/// insulin start the default Reasoner reply misses.
pub struct GlucoseFixture {
    pub corpus: Vec<SerializedStream>,
    pub script: MockScript,
    /// Well-formed proposals in corpus order.
    pub proposals: Vec<ProposedRule>,
}

fn glucose_value(i: usize) -> usize {
    200 + i
}

/// Stay `i` proposes, by `i % 5`: a fresh rule; an exact repeat of the
/// previous one; a case and spacing variant of the one before that; a new
/// action for an earlier trigger; then alternately a decline or a rule
/// without THEN.
pub fn glucose_fixture(n: usize) -> GlucoseFixture {
    let mut corpus = Vec::new();
    let mut entries = Vec::new();
    let mut proposals = Vec::new();
    let mut base: Option<ProposedRule> = None;
    for i in 0..n {
        let s = StayId(format!("glu-{i:02}"));
        let t0 = base_time();
        let events = vec![
            ClinicalEvent::lab(s.clone(), t0, "Glucose", glucose_value(i) as f64, Some(70.0), Some(140.0)).unwrap(),
            ClinicalEvent::medication(s.clone(), t0 + hours(1), "insulin regular", "4 units", "SC", MedPhase::Start).unwrap(),
        ];
        corpus.push(serialize_stay(s, &events, &BundlerConfig::default()).expect("glucose bundles"));

        let threshold = 180 + 10 * (i / 5);
        let fresh = ProposedRule {
            error_analysis: format!("Hyperglycemia above {threshold} went untreated."),
            category: "ENDOCRINE_MGMT".into(),
            trigger_condition: format!("Blood Glucose > {threshold} mg/dL"),
            action_directive: "Initiate sliding scale insulin protocol".into(),
            rule_text: format!("IF Glucose > {threshold} mg/dL THEN initiate sliding scale insulin."),
        };
        let proposal = match i % 5 {
            0 => {
                base = Some(fresh.clone());
                Some(fresh)
            }
            1 => base.clone(),
            2 => base.clone().map(|b| ProposedRule {
                category: "endocrine mgmt".into(),
                trigger_condition: format!("  blood glucose >  {threshold} MG/DL "),
                action_directive: "INITIATE sliding  scale insulin PROTOCOL".into(),
                rule_text: format!("if glucose exceeds {threshold} then start sliding scale insulin"),
                ..b
            }),
            3 => base.clone().map(|b| ProposedRule {
                action_directive: "Start basal insulin".into(),
                rule_text: format!("IF Glucose > {threshold} mg/dL AND patient is NPO, THEN start basal insulin."),
                ..b
            }),
            _ => None,
        };
        let needle = format!("Glucose: {} (High)", glucose_value(i));
        let reply = match (&proposal, i % 10) {
            (Some(p), _) => json!({
                "error_analysis": p.error_analysis,
                "proposed_rule": {
                    "category": p.category,
                    "trigger_condition": p.trigger_condition,
                    "action_directive": p.action_directive,
                    "rule_text": p.rule_text,
                },
            }),
            (None, 4) => json!({"error_analysis": "Documentation gap, not a knowledge gap.", "proposed_rule": null}),
            (None, _) => json!({
                "error_analysis": "Missing rule.",
                "proposed_rule": {
                    "category": "ENDOCRINE_MGMT",
                    "trigger_condition": "Glucose > 300",
                    "action_directive": "Start insulin drip",
                    "rule_text": "Glucose over 300 needs an insulin drip",
                },
            }),
        };
        entries.push(MockEntry::reply(TemplateId::Reflector, &[needle.as_str()], reply));
        proposals.extend(proposal);
    }
    entries.push(MockEntry::fallback(
        TemplateId::Reasoner,
        json!({
            "thought_process": "Recheck before treating.",
            "next_bundle_type": "LABS",
            "predicted_actions": ["Glucose"],
            "citations": [],
        }),
    ));
    entries.push(MockEntry::fallback(TemplateId::Router, json!({"selected_protocol_ids": []})));
    entries.push(MockEntry::fallback(TemplateId::Auditor, json!({"status": "PASS", "critique": "", "risk_level": "LOW"})));
    entries.push(MockEntry::fallback(TemplateId::Steward, json!({"trends": ["glucose high"]})));
    GlucoseFixture {
        corpus,
        script: MockScript::new(entries),
        proposals,
    }
}

const ACTION_POOL: &[&str] = &["Lactate", "Glucose", "Start heparin", "Blood cultures", "Chest x-ray", "Start insulin", "Potassium", "Start vancomycin"];
const RULE_POOL: &[&str] = &["SEPSIS_V1", "RENAL_001", "HEME_001", "ENDOCRINE_MGMT_001"];

fn sample(rng: &mut ChaCha8Rng, pool: &[&str], max: usize) -> Vec<String> {
    let n = rng.gen_range(0..=max);
    let mut items: Vec<String> = pool.choose_multiple(rng, n).map(|s| s.to_string()).collect();
    items.shuffle(rng);
    items
}

/// A random step record exercising every metric field.
pub fn random_trace(rng: &mut ChaCha8Rng, stay: &StayId, t: usize) -> StepTrace {
    let truth = sample(rng, ACTION_POOL, 4);
    let category = if rng.gen_bool(0.85) {
        Some(ActionCategory::ALL[rng.gen_range(0..ActionCategory::ALL.len())])
    } else {
        None
    };
    let mut citations: Vec<String> = sample(rng, RULE_POOL, 2).into_iter().map(|r| format!("R-{r}")).collect();
    if rng.gen_bool(0.3) {
        citations.push(format!("S-{:02}", rng.gen_range(1..6)));
    }
    let actions = sample(rng, ACTION_POOL, 7);
    let triggered = rng.gen_bool(0.2);
    let mut verdict = AuditVerdict::not_run();
    if triggered {
        verdict = AuditVerdict {
            triggered: true,
            trigger_reason: TriggerReason::Uncertainty,
            status: AuditStatus::Pass,
            risk_level: RiskLevel::Low,
            critique: String::new(),
            corrected_actions: None,
        };
    }
    StepTrace {
        schema_version: TRACE_SCHEMA_VERSION,
        stay_id: stay.clone(),
        t,
        bundle_type_truth: category,
        scored: category.is_some() && !truth.is_empty(),
        truth_actions: truth,
        recall_at_5: None,
        prediction: Prediction {
            thought: String::new(),
            bundle_type: None,
            actions: actions.clone(),
            citations,
            uncertainty: rng.gen_range(0.0..1.5),
            raw_logprobs: Vec::new(),
            abstained: false,
        },
        final_actions: actions,
        verdict,
        activated_rule_ids: sample(rng, RULE_POOL, 2),
        router_called: false,
        citation_valid: rng.gen_bool(0.9),
        prompt_tokens: BTreeMap::new(),
        state: IndividualProtocol::default(),
        state_hash: String::new(),
        steward_ran: false,
        incidents: Vec::new(),
        equivalence: rng.gen_bool(0.5).then(|| rng.gen_range(1..=5)),
    }
}

/// A set of 1 to `max_len` random traces.
pub fn random_trace_set(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<StepTrace> {
    let n = rng.gen_range(1..=max_len);
    let stay = StayId::from("trace-set");
    (0..n).map(|t| random_trace(rng, &stay, t)).collect()
}
