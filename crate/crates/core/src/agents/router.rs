use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::engine::Engine;
use super::prompt::{fit_buffer, fit_individual, fit_rules};
use crate::backend::{extract_json, TemplateId};
use crate::bundler::{bundle_text, EventBundle};
use crate::memory::{GlobalProtocol, IndividualProtocol};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteOutcome {
    /// `C_t`: selected rule ids, in selection order.
    pub rule_ids: Vec<String>,
    /// Ids that passed the deterministic trigger prefilter.
    pub prefilter: Vec<String>,
    pub backend_called: bool,
    pub prompt_tokens: Option<usize>,
    pub incident: Option<String>,
}

fn parse_selection(text: &str) -> Result<Vec<String>, String> {
    let v = extract_json(text).map_err(|e| e.to_string())?;
    let ids = v
        .get("selected_protocol_ids")
        .and_then(Value::as_array)
        .ok_or("missing selected_protocol_ids")?;
    Ok(ids
        .iter()
        .filter_map(Value::as_str)
        .map(|s| {
            let s = s.trim().trim_start_matches('[').trim_end_matches(']').trim();
            s.strip_prefix("R-").unwrap_or(s).to_string()
        })
        .collect())
}

/// Candidate rules for the newest bundle in `window` (oldest first).
///
/// The trigger prefilter runs over every bundle in the window. When it
/// yields at most `max_candidates` rules they are returned as-is; otherwise
/// the Router prompt refines the prefiltered index, and its reply is
/// intersected with the prefilter.
pub fn route(engine: &Engine<'_>, window: &[&EventBundle], individual: &IndividualProtocol, protocol: &GlobalProtocol) -> RouteOutcome {
    let cfg = &engine.config;
    let prefilter: Vec<String> = protocol
        .rules()
        .filter(|r| window.iter().any(|b| r.is_triggered(b, individual)))
        .map(|r| r.rule_id.clone())
        .collect();
    if prefilter.len() <= cfg.max_candidates {
        return RouteOutcome {
            rule_ids: prefilter.clone(),
            prefilter,
            backend_called: false,
            prompt_tokens: None,
            incident: None,
        };
    }

    let tok = engine.tokenizer();
    let rules: Vec<_> = prefilter.iter().filter_map(|id| protocol.get(id)).collect();
    let index = fit_rules(&rules, cfg.budgets.rules, tok, |r| format!("{}: {}", r.rule_id, r.trigger_condition));
    let recent: Vec<String> = window.iter().map(|b| bundle_text(b)).collect();
    let recent_refs: Vec<&str> = recent.iter().map(String::as_str).collect();
    let bindings = BTreeMap::from([
        ("patient_state_json", fit_individual(individual, cfg.budgets.individual, tok, false).text),
        ("recent_events_text", fit_buffer(&recent_refs, cfg.budgets.buffer, tok)),
        ("protocol_index_list", index),
    ]);
    let prompt = engine.render(TemplateId::Router, &bindings);
    let reply = engine.ask(TemplateId::Router, prompt, false, parse_selection);

    let fallback = || prefilter.iter().take(cfg.max_candidates).cloned().collect::<Vec<_>>();
    let (rule_ids, incident) = match reply.value {
        Some(selected) => {
            let mut ids: Vec<String> = Vec::new();
            for id in selected {
                if prefilter.contains(&id) && !ids.contains(&id) {
                    ids.push(id);
                }
            }
            ids.truncate(cfg.max_candidates);
            (ids, None)
        }
        None => (fallback(), Some(format!("router-fallback: {}", reply.error.unwrap_or_default()))),
    };
    RouteOutcome {
        rule_ids,
        prefilter,
        backend_called: true,
        prompt_tokens: Some(reply.prompt_tokens),
        incident,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::AgentConfig;
    use crate::backend::{Backend, MockBackend, MockEntry, MockScript};
    use crate::bundler::{build_bundles, BundlerConfig};
    use crate::ingest::{ClinicalEvent, StayId};
    use crate::memory::GlobalRule;
    use chrono::TimeZone;
    use serde_json::json;

    fn lactate_bundle() -> EventBundle {
        let ts = chrono::Utc.with_ymd_and_hms(2024, 1, 1, 8, 0, 0).unwrap();
        let e = ClinicalEvent::lab(StayId::from("s"), ts, "Lactate", 4.8, Some(0.5), Some(2.2)).unwrap();
        build_bundles(&[e], &BundlerConfig::default()).unwrap().remove(0)
    }

    fn lactate_rule(i: usize) -> GlobalRule {
        GlobalRule::new(
            format!("LAC_{i:03}"),
            "LAC",
            format!("Lactate > {}", i % 4),
            "act",
            format!("IF Lactate > {} THEN act {i}", i % 4),
        )
        .unwrap()
    }

    #[test]
    fn few_candidates_skip_backend() {
        let mock = MockBackend::new(MockScript::default());
        let engine = Engine::new(&mock, AgentConfig::default()).unwrap();
        let p = GlobalProtocol::from_rules([lactate_rule(1)]).unwrap();
        let b = lactate_bundle();
        let out = route(&engine, &[&b], &IndividualProtocol::default(), &p);
        assert_eq!(out.rule_ids, vec!["LAC_001"]);
        assert!(!out.backend_called);
        assert!(mock.requests().is_empty());
        let out = route(&engine, &[&b], &IndividualProtocol::default(), &GlobalProtocol::new());
        assert!(out.rule_ids.is_empty());
    }

    #[test]
    fn router_reply_intersected_with_prefilter() {
        let script = MockScript::new(vec![MockEntry::reply(
            TemplateId::Router,
            &["Available Protocol Index"],
            json!({"reasoning": "x", "selected_protocol_ids": ["LAC_005", "GHOST_001", "[R-LAC_002]"]}),
        )]);
        let mock = MockBackend::new(script);
        let engine = Engine::new(&mock, AgentConfig::default()).unwrap();
        let p = GlobalProtocol::from_rules((1..=7).map(lactate_rule)).unwrap();
        let b = lactate_bundle();
        let out = route(&engine, &[&b], &IndividualProtocol::default(), &p);
        assert_eq!(out.prefilter.len(), 7);
        assert_eq!(out.rule_ids, vec!["LAC_005", "LAC_002"]);
        assert!(out.backend_called);
        assert_eq!(mock.requests().len(), 1);
    }

    #[test]
    fn malformed_router_reply_falls_back() {
        let script = MockScript::new(vec![MockEntry::text(TemplateId::Router, &[], "no idea")]);
        let mock = MockBackend::new(script);
        let engine = Engine::new(&mock, AgentConfig::default()).unwrap();
        let p = GlobalProtocol::from_rules((1..=5).map(lactate_rule)).unwrap();
        let b = lactate_bundle();
        let out = route(&engine, &[&b], &IndividualProtocol::default(), &p);
        assert_eq!(out.rule_ids, vec!["LAC_001", "LAC_002", "LAC_003"]);
        assert!(out.incident.is_some());
        assert_eq!(mock.name(), "mock");
    }
}
