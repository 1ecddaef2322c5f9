use std::collections::BTreeMap;

use serde_json::Value;

use super::engine::Engine;
use super::prompt::{fit_buffer, fit_individual, fit_rules};
use super::{BundleType, Prediction};
use crate::backend::{extract_json, TemplateId};
use crate::memory::{GlobalRule, IndividualProtocol};

/// `-mean(logprobs)`, or `+inf` when none are available.
pub fn uncertainty_from_logprobs(logprobs: Option<&[f64]>) -> f64 {
    match logprobs {
        Some(lp) if !lp.is_empty() => {
            let mean = lp.iter().sum::<f64>() / lp.len() as f64;
            (-mean).max(0.0)
        }
        _ => f64::INFINITY,
    }
}

/// Canonical citation id: `S-nn` for state ids, `R-<id>` for rule ids.
pub fn normalize_citation(raw: &str) -> Option<String> {
    let s = raw.trim().trim_start_matches('[').trim_end_matches(']').trim();
    if s.is_empty() {
        return None;
    }
    let upper = s.to_ascii_uppercase();
    if let Some(rest) = upper.strip_prefix("S-") {
        if !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()) {
            let n: u64 = rest.parse().ok()?;
            return Some(format!("S-{n:02}"));
        }
    }
    let id = if upper.starts_with("R-") { &s[2..] } else { s };
    Some(format!("R-{}", id.trim()))
}

fn string_list(v: Option<&Value>) -> Option<Vec<String>> {
    match v? {
        Value::Array(items) => Some(
            items
                .iter()
                .filter_map(|x| match x {
                    Value::String(s) => Some(s.trim().to_string()),
                    Value::Null => None,
                    other => Some(other.to_string()),
                })
                .filter(|s| !s.is_empty())
                .collect(),
        ),
        Value::String(s) if s.trim().is_empty() => Some(Vec::new()),
        Value::String(s) => Some(vec![s.trim().to_string()]),
        _ => None,
    }
}

/// Reasoner reply fields. An explicit empty `predicted_actions` list is a
/// valid "nothing further" prediction; a missing one is malformed.
pub fn parse_prediction(text: &str, max_actions: usize) -> Result<Prediction, String> {
    let v = extract_json(text).map_err(|e| e.to_string())?;
    let mut actions = string_list(v.get("predicted_actions")).ok_or("missing predicted_actions")?;
    actions.truncate(max_actions);
    let citations = string_list(v.get("citations"))
        .unwrap_or_default()
        .iter()
        .filter_map(|c| normalize_citation(c))
        .collect();
    Ok(Prediction {
        thought: v.get("thought_process").and_then(Value::as_str).unwrap_or_default().to_string(),
        bundle_type: v.get("next_bundle_type").and_then(Value::as_str).and_then(BundleType::parse),
        actions,
        citations,
        uncertainty: f64::INFINITY,
        raw_logprobs: Vec::new(),
        abstained: false,
    })
}

pub(crate) struct ReasonOutcome {
    pub prediction: Prediction,
    pub state_ids: Vec<String>,
    pub prompt_tokens: BTreeMap<String, usize>,
    pub incident: Option<String>,
}

pub(crate) fn rule_line(r: &GlobalRule) -> String {
    format!("[R-{}] ({}) {}", r.rule_id, r.category, r.rule_text)
}

/// Predict the next bundle from `C_t`, the individual protocol and the raw
/// history (oldest first, current bundle last).
pub fn reason(engine: &Engine<'_>, rules: &[&GlobalRule], individual: &IndividualProtocol, history: &[&str]) -> Prediction {
    reason_traced(engine, rules, individual, history).prediction
}

pub(crate) fn reason_traced(
    engine: &Engine<'_>,
    rules: &[&GlobalRule],
    individual: &IndividualProtocol,
    history: &[&str],
) -> ReasonOutcome {
    let cfg = &engine.config;
    let tok = engine.tokenizer();
    let rules_text = fit_rules(rules, cfg.budgets.rules, tok, rule_line);
    let view = fit_individual(individual, cfg.budgets.individual, tok, true);
    let buffer_text = fit_buffer(history, cfg.budgets.buffer, tok);
    let mut prompt_tokens = BTreeMap::from([
        ("system".to_string(), engine.shell_tokens(TemplateId::Reasoner)),
        ("rules".to_string(), tok.count(&rules_text)),
        ("individual".to_string(), view.tokens),
        ("buffer".to_string(), tok.count(&buffer_text)),
    ]);
    let bindings = BTreeMap::from([
        ("selected_rules_text", rules_text),
        ("patient_state_json", view.text),
        ("event_stream_history", buffer_text),
    ]);
    let prompt = engine.render(TemplateId::Reasoner, &bindings);
    let max_actions = cfg.max_actions;
    let reply = engine.ask(TemplateId::Reasoner, prompt, true, |t| parse_prediction(t, max_actions));
    prompt_tokens.insert("total".to_string(), reply.prompt_tokens);

    let (prediction, incident) = match (reply.value, reply.response) {
        (Some(mut p), Some(resp)) => {
            p.raw_logprobs = resp.token_logprobs.clone().unwrap_or_default();
            p.uncertainty = uncertainty_from_logprobs(resp.token_logprobs.as_deref());
            (p, None)
        }
        _ => (
            Prediction::abstain(),
            Some(format!("reasoner-abstain: {}", reply.error.unwrap_or_default())),
        ),
    };
    ReasonOutcome {
        prediction,
        state_ids: view.state_ids,
        prompt_tokens,
        incident,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::AgentConfig;
    use crate::backend::{MockBackend, MockEntry, MockScript};
    use serde_json::json;

    #[test]
    fn uncertainty_is_negated_mean() {
        let u = uncertainty_from_logprobs(Some(&[-0.1, -0.3]));
        assert!((u - 0.2).abs() < 1e-12);
        assert_eq!(uncertainty_from_logprobs(None), f64::INFINITY);
        assert_eq!(uncertainty_from_logprobs(Some(&[])), f64::INFINITY);
    }

    #[test]
    fn citations_are_canonical() {
        assert_eq!(normalize_citation("[R-SEPSIS_V1]").as_deref(), Some("R-SEPSIS_V1"));
        assert_eq!(normalize_citation("SEPSIS_V1").as_deref(), Some("R-SEPSIS_V1"));
        assert_eq!(normalize_citation("[s-5]").as_deref(), Some("S-05"));
        assert_eq!(normalize_citation(" [] "), None);
    }

    #[test]
    fn actions_truncated_to_five_in_order() {
        let acts: Vec<String> = (0..8).map(|i| format!("a{i}")).collect();
        let p = parse_prediction(&json!({"predicted_actions": acts}).to_string(), 5).unwrap();
        assert_eq!(p.actions, vec!["a0", "a1", "a2", "a3", "a4"]);
        assert!(parse_prediction("{\"citations\": []}", 5).is_err());
        assert!(parse_prediction("{\"predicted_actions\": []}", 5).unwrap().actions.is_empty());
    }

    #[test]
    fn reask_then_abstain() {
        let script = MockScript::new(vec![MockEntry::text(TemplateId::Reasoner, &[], "I think fluids.")]);
        let mock = MockBackend::new(script);
        let engine = Engine::new(&mock, AgentConfig::default()).unwrap();
        let out = reason_traced(&engine, &[], &IndividualProtocol::default(), &["[LABS]\nLactate: 4.8 (High)"]);
        assert!(out.prediction.abstained);
        assert!(out.prediction.actions.is_empty());
        assert_eq!(out.prediction.uncertainty, f64::INFINITY);
        assert!(out.incident.is_some());
        assert_eq!(mock.requests().len(), 2);
    }

    #[test]
    fn reask_recovers() {
        let script = MockScript::new(vec![
            MockEntry::reply(TemplateId::Reasoner, &["Return ONLY the JSON object described above."], json!({"predicted_actions": ["x"]}))
                .with_logprobs(vec![-0.1, -0.3]),
            MockEntry::text(TemplateId::Reasoner, &[], "prose"),
        ]);
        let mock = MockBackend::new(script);
        let engine = Engine::new(&mock, AgentConfig::default()).unwrap();
        let p = reason(&engine, &[], &IndividualProtocol::default(), &["e"]);
        assert_eq!(p.actions, vec!["x"]);
        assert!((p.uncertainty - 0.2).abs() < 1e-12);
    }
}
