//! Offline rule induction: failures over a training corpus become IF/THEN
//! rules appended to the global protocol, which is frozen at the end.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agents::{bullet_list, fit_buffer, Engine};
use crate::backend::{extract_json, TemplateId};
use crate::bundler::SerializedStream;
use crate::eval::{matched_count, run_trajectory, AliasTable};
use crate::ingest::StayId;
use crate::memory::{has_if_then, GlobalProtocol, GlobalRule, MemoryError};
use crate::text::{contains_phrase, normalize};

#[derive(Debug, Error, PartialEq)]
pub enum ReflectError {
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid identifier pattern: {0}")]
    Pattern(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureCase {
    pub stay_id: StayId,
    pub t: usize,
    /// Bundles `0..=t`, newest kept first under the reflection budget.
    pub history_text: String,
    pub predicted: Vec<String>,
    pub truth: Vec<String>,
}

/// Recall@5 below 1. `truth` must be nonempty.
pub fn detect_failure(pred: &[String], truth: &[String], aliases: &AliasTable) -> bool {
    matched_count(pred, truth, 5, aliases) < truth.len()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposedRule {
    pub error_analysis: String,
    pub category: String,
    pub trigger_condition: String,
    pub action_directive: String,
    pub rule_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ReflectOutcome {
    Proposed(ProposedRule),
    Declined,
    Malformed(String),
    Unavailable(String),
}

fn text_field(v: &Value, key: &str) -> String {
    v.get(key).and_then(Value::as_str).unwrap_or_default().trim().to_string()
}

/// `Ok(None)` when the reply declines; `Err` when no usable JSON came back.
pub fn parse_proposal(text: &str) -> Result<Option<ProposedRule>, String> {
    let v = extract_json(text).map_err(|e| e.to_string())?;
    let rule = match v.get("proposed_rule") {
        None | Some(Value::Null) => return Ok(None),
        Some(Value::Object(o)) if o.is_empty() => return Ok(None),
        Some(Value::Object(_)) => v.get("proposed_rule").expect("present"),
        Some(Value::String(s)) if s.trim().is_empty() => return Ok(None),
        Some(_) => return Err("proposed_rule is not an object".into()),
    };
    Ok(Some(ProposedRule {
        error_analysis: text_field(&v, "error_analysis"),
        category: text_field(rule, "category"),
        trigger_condition: text_field(rule, "trigger_condition"),
        action_directive: text_field(rule, "action_directive"),
        rule_text: text_field(rule, "rule_text"),
    }))
}

fn check_shape(r: &ProposedRule) -> Result<(), String> {
    for (name, value) in [
        ("trigger_condition", &r.trigger_condition),
        ("action_directive", &r.action_directive),
        ("rule_text", &r.rule_text),
    ] {
        if value.is_empty() {
            return Err(format!("empty {name}"));
        }
    }
    if !has_if_then(&r.rule_text) {
        return Err("rule_text lacks IF/THEN".into());
    }
    Ok(())
}

/// Ask the Reflector for a rule that would have prevented `case`.
pub fn reflect(engine: &Engine<'_>, case: &FailureCase) -> ReflectOutcome {
    let bindings = BTreeMap::from([
        ("patient_history_text", case.history_text.clone()),
        ("ground_truth_action", bullet_list(&case.truth)),
        ("ai_prediction", bullet_list(&case.predicted)),
    ]);
    let prompt = engine.templates().render(TemplateId::Reflector, &bindings).expect("reflector slots bound");
    let reply = engine.ask(TemplateId::Reflector, prompt, true, parse_proposal);
    match (reply.value, reply.response) {
        (Some(Some(rule)), _) => match check_shape(&rule) {
            Ok(()) => ReflectOutcome::Proposed(rule),
            Err(reason) => {
                tracing::info!(stay = %case.stay_id, t = case.t, %reason, "malformed rule");
                ReflectOutcome::Malformed(reason)
            }
        },
        (Some(None), _) => ReflectOutcome::Declined,
        (None, Some(_)) | (None, None) => ReflectOutcome::Unavailable(reply.error.unwrap_or_default()),
    }
}

/// Rejects rule text naming corpus identifiers.
#[derive(Debug, Clone)]
pub struct IdentifierScreen {
    literals: BTreeSet<String>,
    patterns: Vec<Regex>,
}

pub const DEFAULT_ID_PATTERN: &str = r"\b\d{7,}\b";

impl IdentifierScreen {
    pub fn new<I, S>(literals: I, patterns: &[String]) -> Result<Self, ReflectError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let patterns = patterns
            .iter()
            .map(|p| Regex::new(p).map_err(|e| ReflectError::Pattern(e.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(IdentifierScreen {
            literals: literals.into_iter().map(|s| s.as_ref().trim().to_string()).filter(|s| !s.is_empty()).collect(),
            patterns,
        })
    }

    pub fn for_corpus(corpus: &[SerializedStream], patterns: &[String]) -> Result<Self, ReflectError> {
        Self::new(corpus.iter().map(|s| s.stay_id.as_str()), patterns)
    }

    /// The first identifier found in `text`.
    pub fn check(&self, text: &str) -> Option<String> {
        if let Some(lit) = self.literals.iter().find(|l| contains_phrase(text, l)) {
            return Some(lit.clone());
        }
        self.patterns.iter().find_map(|p| p.find(text).map(|m| m.as_str().to_string()))
    }
}

impl Default for IdentifierScreen {
    fn default() -> Self {
        Self::new(Vec::<String>::new(), &[DEFAULT_ID_PATTERN.to_string()]).expect("default pattern compiles")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Admission {
    Admitted(String),
    Duplicate(String),
    IdentifierLeak(String),
    Malformed(String),
}

pub fn category_slug(category: &str) -> String {
    let mut slug = String::new();
    for c in category.trim().chars() {
        if c.is_ascii_alphanumeric() {
            slug.push(c.to_ascii_uppercase());
        } else if !slug.ends_with('_') {
            slug.push('_');
        }
    }
    let slug = slug.trim_matches('_').to_string();
    if slug.is_empty() {
        "GENERAL".to_string()
    } else {
        slug
    }
}

/// Append `proposed` unless it repeats an existing trigger and action or
/// leaks an identifier. Ids are `<CATEGORY>_<nnn>`, numbered per category.
pub fn admit_rule(proposed: &ProposedRule, protocol: &mut GlobalProtocol, screen: &IdentifierScreen) -> Result<Admission, ReflectError> {
    if protocol.is_frozen() {
        return Err(MemoryError::ProtocolFrozen.into());
    }
    let fields = [
        &proposed.rule_text,
        &proposed.trigger_condition,
        &proposed.action_directive,
        &proposed.category,
    ];
    if let Some(hit) = fields.iter().find_map(|f| screen.check(f)) {
        tracing::info!(identifier = %hit, "rule rejected: identifier leak");
        return Ok(Admission::IdentifierLeak(hit));
    }
    let trigger = normalize(&proposed.trigger_condition);
    let action = normalize(&proposed.action_directive);
    if let Some(dup) = protocol
        .rules()
        .find(|r| normalize(&r.trigger_condition) == trigger && normalize(&r.action_directive) == action)
    {
        return Ok(Admission::Duplicate(dup.rule_id.clone()));
    }
    let category = category_slug(&proposed.category);
    let mut seq = protocol.rules().filter(|r| r.category == category).count() + 1;
    let mut id = format!("{category}_{seq:03}");
    while protocol.get(&id).is_some() {
        seq += 1;
        id = format!("{category}_{seq:03}");
    }
    let rule = match GlobalRule::new(
        id.clone(),
        category,
        &proposed.trigger_condition,
        &proposed.action_directive,
        &proposed.rule_text,
    ) {
        Ok(r) => r,
        Err(MemoryError::MalformedRule(reason)) => return Ok(Admission::Malformed(reason)),
        Err(e) => return Err(e.into()),
    };
    protocol.append_rule(rule)?;
    Ok(Admission::Admitted(id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Phase1Config {
    /// Token budget for the history shown to the Reflector.
    pub reflection_budget: usize,
    pub id_patterns: Vec<String>,
    /// Shards run independently and are merged by the dedup rule.
    pub workers: usize,
    pub aliases: AliasTable,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Phase1Config {
            reflection_budget: 2000,
            id_patterns: vec![DEFAULT_ID_PATTERN.to_string()],
            workers: 1,
            aliases: AliasTable::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InductionRecord {
    pub stay_id: StayId,
    pub t: usize,
    pub truth: Vec<String>,
    pub predicted: Vec<String>,
    pub proposed: Option<ProposedRule>,
    pub admitted: bool,
    pub rule_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase1Output {
    pub protocol: GlobalProtocol,
    pub log: Vec<InductionRecord>,
    pub trajectories: usize,
    pub steps: usize,
    pub failures: usize,
    /// Rule count after each trajectory (single-worker runs).
    pub rule_counts: Vec<usize>,
}

fn history_for(engine: &Engine<'_>, stream: &SerializedStream, t: usize, budget: usize) -> String {
    let refs: Vec<&str> = stream.text_per_bundle[..=t].iter().map(String::as_str).collect();
    fit_buffer(&refs, budget, engine.tokenizer())
}

fn record(case: &FailureCase, outcome: &ReflectOutcome) -> InductionRecord {
    let (proposed, reason) = match outcome {
        ReflectOutcome::Proposed(r) => (Some(r.clone()), String::new()),
        ReflectOutcome::Declined => (None, "declined".to_string()),
        ReflectOutcome::Malformed(e) => (None, format!("malformed: {e}")),
        ReflectOutcome::Unavailable(e) => (None, format!("unavailable: {e}")),
    };
    InductionRecord {
        stay_id: case.stay_id.clone(),
        t: case.t,
        truth: case.truth.clone(),
        predicted: case.predicted.clone(),
        proposed,
        admitted: false,
        rule_id: None,
        reason,
    }
}

fn apply_admission(rec: &mut InductionRecord, admission: Admission) {
    match admission {
        Admission::Admitted(id) => {
            rec.admitted = true;
            rec.rule_id = Some(id);
            rec.reason = "admitted".into();
        }
        Admission::Duplicate(id) => {
            rec.admitted = false;
            rec.rule_id = None;
            rec.reason = format!("duplicate of {id}");
        }
        Admission::IdentifierLeak(hit) => rec.reason = format!("identifier-leak: {hit}"),
        Admission::Malformed(e) => rec.reason = format!("malformed: {e}"),
    }
}

struct ShardRun {
    protocol: GlobalProtocol,
    log: Vec<(usize, InductionRecord)>,
    steps: usize,
    failures: usize,
    rule_counts: Vec<usize>,
}

fn run_shard(
    engine: &Engine<'_>,
    corpus: &[SerializedStream],
    indices: impl Iterator<Item = usize>,
    seed: &GlobalProtocol,
    screen: &IdentifierScreen,
    cfg: &Phase1Config,
) -> Result<ShardRun, ReflectError> {
    let mut protocol = seed.clone();
    let mut out = ShardRun {
        protocol: GlobalProtocol::new(),
        log: Vec::new(),
        steps: 0,
        failures: 0,
        rule_counts: Vec::new(),
    };
    for i in indices {
        let stream = &corpus[i];
        let snapshot = Arc::new(protocol.clone());
        let run = run_trajectory(engine, stream, snapshot, &cfg.aliases, None);
        out.steps += run.traces.len();
        let mut pending = Vec::new();
        for trace in run.traces.iter().filter(|t| t.scored) {
            if !detect_failure(&trace.final_actions, &trace.truth_actions, &cfg.aliases) {
                continue;
            }
            out.failures += 1;
            let case = FailureCase {
                stay_id: stream.stay_id.clone(),
                t: trace.t,
                history_text: history_for(engine, stream, trace.t, cfg.reflection_budget),
                predicted: trace.final_actions.clone(),
                truth: trace.truth_actions.clone(),
            };
            let outcome = reflect(engine, &case);
            pending.push(record(&case, &outcome));
        }
        for mut rec in pending {
            if let Some(rule) = rec.proposed.clone() {
                apply_admission(&mut rec, admit_rule(&rule, &mut protocol, screen)?);
            }
            out.log.push((i, rec));
        }
        out.rule_counts.push(protocol.len());
    }
    out.protocol = protocol;
    Ok(out)
}

/// Phase I over `corpus`, starting from an unfrozen `seed`. The protocol
/// grows between trajectories and is frozen on return.
pub fn phase1_run(
    corpus: &[SerializedStream],
    engine: &Engine<'_>,
    seed: GlobalProtocol,
    cfg: &Phase1Config,
) -> Result<Phase1Output, ReflectError> {
    if corpus.is_empty() {
        return Err(ReflectError::EmptyCorpus);
    }
    if seed.is_frozen() {
        return Err(MemoryError::ProtocolFrozen.into());
    }
    let screen = IdentifierScreen::for_corpus(corpus, &cfg.id_patterns)?;
    let workers = cfg.workers.clamp(1, corpus.len());
    if workers == 1 {
        let shard = run_shard(engine, corpus, 0..corpus.len(), &seed, &screen, cfg)?;
        let mut protocol = shard.protocol;
        protocol.freeze();
        return Ok(Phase1Output {
            protocol,
            log: shard.log.into_iter().map(|(_, r)| r).collect(),
            trajectories: corpus.len(),
            steps: shard.steps,
            failures: shard.failures,
            rule_counts: shard.rule_counts,
        });
    }

    let shards: Vec<Result<ShardRun, ReflectError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (seed, screen) = (&seed, &screen);
                scope.spawn(move || run_shard(engine, corpus, (w..corpus.len()).step_by(workers), seed, screen, cfg))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("phase-1 worker")).collect()
    });
    let mut protocol = seed.clone();
    let mut log = Vec::new();
    let (mut steps, mut failures) = (0, 0);
    for shard in shards {
        let shard = shard?;
        steps += shard.steps;
        failures += shard.failures;
        for (i, mut rec) in shard.log {
            if rec.admitted {
                let rule = rec.proposed.clone().expect("admitted records carry a rule");
                apply_admission(&mut rec, admit_rule(&rule, &mut protocol, &screen)?);
            }
            log.push((i, rec));
        }
    }
    log.sort_by_key(|(i, r)| (*i, r.t));
    protocol.freeze();
    Ok(Phase1Output {
        protocol,
        log: log.into_iter().map(|(_, r)| r).collect(),
        trajectories: corpus.len(),
        steps,
        failures,
        rule_counts: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::AgentConfig;
    use crate::backend::{MockBackend, MockEntry, MockScript};
    use proptest::prelude::*;
    use serde_json::json;

    fn glucose_rule() -> ProposedRule {
        ProposedRule {
            error_analysis: "missing insulin rule".into(),
            category: "ENDOCRINE_MGMT".into(),
            trigger_condition: "Blood Glucose > 180 mg/dL".into(),
            action_directive: "Initiate sliding scale insulin protocol".into(),
            rule_text: "IF Glucose > 180 mg/dL AND patient is NPO, THEN start basal insulin.".into(),
        }
    }

    fn case() -> FailureCase {
        FailureCase {
            stay_id: StayId::from("s1"),
            t: 0,
            history_text: "[LABS]\nGlucose: 250 (High)".into(),
            predicted: vec!["Repeat labs".into()],
            truth: vec!["Start insulin".into()],
        }
    }

    #[test]
    fn reflector_example_output_parses() {
        let reply = json!({
            "error_analysis": "Brief explanation of the failure mode.",
            "proposed_rule": {
                "category": "ENDOCRINE_MGMT",
                "trigger_condition": "Blood Glucose > 180 mg/dL",
                "action_directive": "Initiate sliding scale insulin protocol",
                "rule_text": "IF Glucose > 180 mg/dL AND patient is NPO, THEN start basal insulin."
            }
        });
        let mock = MockBackend::new(MockScript::new(vec![MockEntry::reply(TemplateId::Reflector, &["Glucose: 250"], reply)]));
        let engine = Engine::new(&mock, AgentConfig::default()).unwrap();
        match reflect(&engine, &case()) {
            ReflectOutcome::Proposed(r) => {
                assert_eq!(r.category, "ENDOCRINE_MGMT");
                assert_eq!(r.trigger_condition, "Blood Glucose > 180 mg/dL");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn decline_and_malformed_paths() {
        let mock = MockBackend::new(MockScript::new(vec![MockEntry::text(TemplateId::Reflector, &[], "No rule needed.")]));
        let engine = Engine::new(&mock, AgentConfig::default()).unwrap();
        assert!(matches!(reflect(&engine, &case()), ReflectOutcome::Unavailable(_)));
        assert_eq!(mock.requests().len(), 2);

        let no_then = json!({"proposed_rule": {"category": "X", "trigger_condition": "a", "action_directive": "b", "rule_text": "IF a do b"}});
        let mock = MockBackend::new(MockScript::new(vec![MockEntry::reply(TemplateId::Reflector, &[], no_then)]));
        let engine = Engine::new(&mock, AgentConfig::default()).unwrap();
        assert!(matches!(reflect(&engine, &case()), ReflectOutcome::Malformed(_)));

        assert_eq!(parse_proposal(r#"{"proposed_rule": null}"#), Ok(None));
        assert_eq!(parse_proposal(r#"{"proposed_rule": {}}"#), Ok(None));
    }

    #[test]
    fn admission_ids_and_dedup() {
        let mut p = GlobalProtocol::new();
        let screen = IdentifierScreen::default();
        assert_eq!(admit_rule(&glucose_rule(), &mut p, &screen), Ok(Admission::Admitted("ENDOCRINE_MGMT_001".into())));
        let mut again = glucose_rule();
        again.trigger_condition = "  blood glucose >  180 MG/DL".into();
        again.rule_text = "IF glucose high THEN insulin".into();
        assert_eq!(admit_rule(&again, &mut p, &screen), Ok(Admission::Duplicate("ENDOCRINE_MGMT_001".into())));
        let mut other = glucose_rule();
        other.action_directive = "Start basal insulin".into();
        assert_eq!(admit_rule(&other, &mut p, &screen), Ok(Admission::Admitted("ENDOCRINE_MGMT_002".into())));
        p.freeze();
        assert_eq!(admit_rule(&glucose_rule(), &mut p, &screen), Err(ReflectError::Memory(MemoryError::ProtocolFrozen)));
    }

    #[test]
    fn identifier_screen() {
        let screen = IdentifierScreen::new(["stay-0042"], &[DEFAULT_ID_PATTERN.to_string()]).unwrap();
        let mut r = glucose_rule();
        r.rule_text = "IF patient 30012345 has glucose > 180 THEN insulin".into();
        let mut p = GlobalProtocol::new();
        assert_eq!(admit_rule(&r, &mut p, &screen), Ok(Admission::IdentifierLeak("30012345".into())));
        r.rule_text = "IF stay-0042 glucose > 180 THEN insulin".into();
        assert_eq!(admit_rule(&r, &mut p, &screen), Ok(Admission::IdentifierLeak("stay-0042".into())));
        assert!(p.is_empty());
    }

    #[test]
    fn category_slugs() {
        assert_eq!(category_slug("endocrine mgmt"), "ENDOCRINE_MGMT");
        assert_eq!(category_slug(" -- "), "GENERAL");
    }

    proptest! {
        #[test]
        fn failure_matches_recall_threshold(
            pred in proptest::collection::vec("[abc]", 0..7),
            truth in proptest::collection::vec("[abc]", 1..5),
        ) {
            let aliases = AliasTable::default();
            let recall = crate::eval::recall_at_k(&pred, &truth, 5, &aliases).unwrap();
            prop_assert_eq!(detect_failure(&pred, &truth, &aliases), recall < 1.0);
        }
    }
}
