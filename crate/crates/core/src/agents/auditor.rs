use std::collections::BTreeMap;

use serde_json::Value;

use super::engine::Engine;
use super::prompt::{bullet_list, fit_buffer, fit_rules};
use super::reasoner::rule_line;
use super::risk::RiskVocabulary;
use super::{AuditStatus, AuditVerdict, Prediction, RiskLevel, TriggerReason};
use crate::backend::{extract_json, TemplateId};
use crate::memory::{GlobalRule, IndividualProtocol};

/// Escalate when `U > tau` (strict) or any action names a risk term.
pub fn should_audit(pred: &Prediction, tau: f64, risk: &RiskVocabulary) -> (bool, TriggerReason) {
    let uncertain = pred.uncertainty > tau;
    let vocab = pred.actions.iter().any(|a| risk.hit(a).is_some());
    let reason = match (uncertain, vocab) {
        (false, false) => TriggerReason::None,
        (true, false) => TriggerReason::Uncertainty,
        (false, true) => TriggerReason::SafetyVocab,
        (true, true) => TriggerReason::Both,
    };
    (uncertain || vocab, reason)
}

fn actions_field(v: &Value) -> Option<Vec<String>> {
    let field = v.get("corrected_actions").or_else(|| v.get("corrected_action"))?;
    let list: Vec<String> = match field {
        Value::String(s) => vec![s.trim().to_string()],
        Value::Array(items) => items.iter().filter_map(Value::as_str).map(|s| s.trim().to_string()).collect(),
        _ => Vec::new(),
    };
    let list: Vec<String> = list.into_iter().filter(|s| !s.is_empty()).collect();
    (!list.is_empty()).then_some(list)
}

/// A triggered verdict from an Auditor reply. Corrections are kept only on
/// `FAIL`.
pub fn parse_verdict(text: &str, reason: TriggerReason, max_actions: usize) -> Result<AuditVerdict, String> {
    let v = extract_json(text).map_err(|e| e.to_string())?;
    let status = match v.get("status").and_then(Value::as_str).map(|s| s.trim().to_ascii_uppercase()) {
        Some(s) if s == "PASS" => AuditStatus::Pass,
        Some(s) if s == "FAIL" => AuditStatus::Fail,
        _ => return Err("missing or unknown status".into()),
    };
    let risk_level = match v.get("risk_level").and_then(Value::as_str).map(|s| s.trim().to_ascii_uppercase()) {
        Some(s) if s == "LOW" => RiskLevel::Low,
        Some(s) if s == "HIGH" => RiskLevel::High,
        _ if status == AuditStatus::Fail => RiskLevel::High,
        _ => RiskLevel::Low,
    };
    let corrected_actions = match status {
        AuditStatus::Fail => actions_field(&v).map(|mut a| {
            a.truncate(max_actions);
            a
        }),
        _ => None,
    };
    Ok(AuditVerdict {
        triggered: true,
        trigger_reason: reason,
        status,
        risk_level,
        critique: v.get("critique").and_then(Value::as_str).unwrap_or_default().to_string(),
        corrected_actions,
    })
}

pub(crate) struct AuditOutcome {
    pub verdict: AuditVerdict,
    pub prompt_tokens: usize,
    pub incident: Option<String>,
}

/// Verify a triggered prediction. A malformed or missing reply fails open.
pub fn audit(
    engine: &Engine<'_>,
    pred: &Prediction,
    reason: TriggerReason,
    rules: &[&GlobalRule],
    individual: &IndividualProtocol,
) -> AuditVerdict {
    audit_traced(engine, pred, reason, rules, individual).verdict
}

pub(crate) fn audit_traced(
    engine: &Engine<'_>,
    pred: &Prediction,
    reason: TriggerReason,
    rules: &[&GlobalRule],
    individual: &IndividualProtocol,
) -> AuditOutcome {
    let cfg = &engine.config;
    let tok = engine.tokenizer();
    let actions = bullet_list(&pred.actions);
    let problems: Vec<String> = individual.active_problems.iter().map(|p| format!("- {p}")).collect();
    let problem_refs: Vec<&str> = problems.iter().map(String::as_str).collect();
    let problems_text = if problems.is_empty() {
        "(none)".to_string()
    } else {
        fit_buffer(&problem_refs, cfg.budgets.individual, tok).replace("\n\n", "\n")
    };
    let bindings = BTreeMap::from([
        ("proposed_actions_list", tok.truncate(&actions, cfg.budgets.buffer).to_string()),
        ("active_problems_list", problems_text),
        ("active_rules_text", fit_rules(rules, cfg.budgets.rules, tok, rule_line)),
    ]);
    let prompt = engine.render(TemplateId::Auditor, &bindings);
    let max_actions = cfg.max_actions;
    let reply = engine.ask(TemplateId::Auditor, prompt, false, |t| parse_verdict(t, reason, max_actions));
    match reply.value {
        Some(verdict) => AuditOutcome {
            verdict,
            prompt_tokens: reply.prompt_tokens,
            incident: None,
        },
        None => AuditOutcome {
            verdict: AuditVerdict {
                triggered: true,
                trigger_reason: reason,
                status: AuditStatus::Pass,
                risk_level: RiskLevel::High,
                critique: "auditor-unavailable".to_string(),
                corrected_actions: None,
            },
            prompt_tokens: reply.prompt_tokens,
            incident: Some(format!("auditor-unavailable: {}", reply.error.unwrap_or_default())),
        },
    }
}
