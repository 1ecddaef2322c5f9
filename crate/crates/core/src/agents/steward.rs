use std::collections::{BTreeMap, HashSet};

use serde_json::{Map, Value};

use super::engine::Engine;
use super::prompt::fit_individual;
use crate::backend::{extract_json, TemplateId};
use crate::ingest::{MedPhase, Timestamp};
use crate::memory::{BufferEntry, HistoryEntry, IndividualProtocol, MedOrder};
use crate::text::{contains_phrase, normalize};

const PROBLEM_KEYS: &[&str] = &["active_problems", "problems", "diagnoses"];
const MED_KEYS: &[&str] = &["current_meds", "medications", "meds"];
const PROCEDURE_KEYS: &[&str] = &["procedures"];
const TREND_KEYS: &[&str] = &["trends", "trajectory"];
const HISTORY_KEYS: &[&str] = &["history"];

fn known(obj: &Map<String, Value>) -> bool {
    [PROBLEM_KEYS, MED_KEYS, PROCEDURE_KEYS, TREND_KEYS, HISTORY_KEYS]
        .iter()
        .flat_map(|ks| ks.iter())
        .any(|k| obj.contains_key(*k))
}

/// The state object in a Steward reply, looking one level down when the
/// reply wraps it.
fn state_object(v: &Value) -> Option<&Map<String, Value>> {
    let obj = v.as_object()?;
    if known(obj) {
        return Some(obj);
    }
    obj.values().filter_map(Value::as_object).find(|o| known(o)).or(Some(obj))
}

fn item_text(v: &Value) -> Option<String> {
    let s = match v {
        Value::String(s) => s.trim().to_string(),
        Value::Null => return None,
        Value::Object(o) => ["name", "item", "drug", "description", "value", "text"]
            .iter()
            .find_map(|k| o.get(*k).and_then(Value::as_str))
            .map(|s| s.trim().to_string())
            .unwrap_or_else(|| v.to_string()),
        other => other.to_string(),
    };
    (!s.is_empty()).then_some(s)
}

fn field(obj: &Map<String, Value>, keys: &[&str]) -> Option<Vec<String>> {
    let v = keys.iter().find_map(|k| obj.get(*k))?;
    match v {
        Value::Array(items) => Some(items.iter().filter_map(item_text).collect()),
        Value::Null => Some(Vec::new()),
        other => Some(item_text(other).into_iter().collect()),
    }
}

fn history_field(obj: &Map<String, Value>) -> Vec<HistoryEntry> {
    let Some(Value::Array(items)) = obj.get("history") else {
        return Vec::new();
    };
    items
        .iter()
        .filter_map(|v| {
            let resolved_at = v
                .get("resolved_at")
                .and_then(Value::as_str)
                .and_then(crate::ingest::parse_timestamp);
            item_text(v).map(|item| HistoryEntry { item, resolved_at })
        })
        .collect()
}

fn union(base: &mut Vec<String>, extra: impl IntoIterator<Item = String>) {
    let mut seen: HashSet<String> = base.iter().map(|s| normalize(s)).collect();
    for item in extra {
        if seen.insert(normalize(&item)) {
            base.push(item);
        }
    }
}

/// Final order per drug, in chronological order of the last order.
fn last_orders(orders: &[MedOrder]) -> Vec<(MedPhase, String)> {
    let mut last: BTreeMap<String, (usize, MedPhase, String)> = BTreeMap::new();
    for (i, o) in orders.iter().enumerate() {
        last.insert(normalize(&o.drug), (i, o.phase, o.drug.trim().to_string()));
    }
    let mut out: Vec<_> = last.into_values().collect();
    out.sort_by_key(|(i, _, _)| *i);
    out.into_iter().map(|(_, p, d)| (p, d)).collect()
}

/// Merge a Steward reply into `prior`. Fields absent from the reply are kept;
/// problems dropped by the reply move to history; medications leave
/// `current_meds` only through stop orders; procedures and history only grow.
pub fn merge_state(prior: &IndividualProtocol, reply: &Value, orders: &[MedOrder], observed_at: Option<Timestamp>) -> IndividualProtocol {
    let mut next = prior.clone();
    let Some(obj) = state_object(reply) else {
        return next;
    };
    if let Some(problems) = field(obj, PROBLEM_KEYS) {
        let kept: HashSet<String> = problems.iter().map(|p| normalize(p)).collect();
        for old in &prior.active_problems {
            if !kept.contains(&normalize(old)) {
                next.history.push(HistoryEntry {
                    item: old.clone(),
                    resolved_at: observed_at,
                });
            }
        }
        next.active_problems = problems;
    }
    if let Some(meds) = field(obj, MED_KEYS) {
        let stopped: Vec<String> = last_orders(orders)
            .into_iter()
            .filter(|(p, _)| *p == MedPhase::Stop)
            .map(|(_, d)| d)
            .collect();
        let mut merged = meds;
        union(
            &mut merged,
            prior.current_meds.iter().filter(|m| !stopped.iter().any(|d| contains_phrase(m, d))).cloned(),
        );
        next.current_meds = merged;
    }
    if let Some(procs) = field(obj, PROCEDURE_KEYS) {
        union(&mut next.procedures, procs);
    }
    if let Some(trends) = field(obj, TREND_KEYS) {
        next.trends = trends;
    }
    let mut seen: HashSet<String> = next.history.iter().map(|h| normalize(&h.item)).collect();
    for h in history_field(obj) {
        if seen.insert(normalize(&h.item)) {
            next.history.push(h);
        }
    }
    next.dedup();
    next
}

/// Hard medication rules, applied whatever the backend said: a drug whose
/// last order is a stop appears in no `current_meds` entry; a drug whose
/// last order is a start appears in at least one.
pub fn apply_med_orders(ip: &mut IndividualProtocol, orders: &[MedOrder]) {
    for (phase, drug) in last_orders(orders) {
        match phase {
            MedPhase::Stop => ip.current_meds.retain(|m| !contains_phrase(m, &drug)),
            MedPhase::Start => {
                if !ip.current_meds.iter().any(|m| contains_phrase(m, &drug)) {
                    ip.current_meds.push(drug);
                }
            }
        }
    }
    ip.dedup();
}

#[derive(Debug, Clone, PartialEq)]
pub struct StewardOutcome {
    pub individual: IndividualProtocol,
    pub calls: usize,
    /// Largest Steward prompt rendered.
    pub prompt_tokens: usize,
    pub incidents: Vec<String>,
}

/// Split entries (oldest first) into runs whose joined text fits `budget`.
fn chunks<'e>(entries: &'e [BufferEntry], budget: usize, engine: &Engine<'_>) -> Vec<&'e [BufferEntry]> {
    let tok = engine.tokenizer();
    let mut out = Vec::new();
    let mut start = 0;
    let mut used = 0usize;
    for (i, e) in entries.iter().enumerate() {
        let n = tok.count(&e.text);
        if i > start && used + n > budget {
            out.push(&entries[start..i]);
            start = i;
            used = 0;
        }
        used += n;
    }
    if start < entries.len() {
        out.push(&entries[start..]);
    }
    out
}

/// Absorb flushed buffer entries into the individual protocol.
pub fn steward_update(engine: &Engine<'_>, individual: &IndividualProtocol, flushed: &[BufferEntry]) -> StewardOutcome {
    let cfg = &engine.config;
    let tok = engine.tokenizer();
    let mut state = individual.clone();
    let mut outcome = StewardOutcome {
        individual: IndividualProtocol::default(),
        calls: 0,
        prompt_tokens: 0,
        incidents: Vec::new(),
    };
    for chunk in chunks(flushed, cfg.budgets.buffer, engine) {
        let orders: Vec<MedOrder> = chunk.iter().flat_map(|e| e.med_orders.iter().cloned()).collect();
        let observed_at = chunk.iter().rev().find_map(|e| e.observed_at);
        let events = chunk.iter().map(|e| e.text.as_str()).collect::<Vec<_>>().join("\n\n");
        let bindings = BTreeMap::from([
            ("current_state_json", fit_individual(&state, cfg.budgets.individual, tok, false).text),
            ("new_event_bundle_text", tok.truncate(&events, cfg.budgets.buffer).to_string()),
        ]);
        let prompt = engine.render(TemplateId::Steward, &bindings);
        let reply = engine.ask(TemplateId::Steward, prompt, true, |t| {
            let v = extract_json(t).map_err(|e| e.to_string())?;
            v.is_object().then_some(v).ok_or_else(|| "reply is not an object".to_string())
        });
        outcome.calls += reply.attempts;
        outcome.prompt_tokens = outcome.prompt_tokens.max(reply.prompt_tokens);
        state = match reply.value {
            Some(v) => merge_state(&state, &v, &orders, observed_at),
            None => {
                outcome.incidents.push(format!("steward-deterministic: {}", reply.error.unwrap_or_default()));
                state
            }
        };
        apply_med_orders(&mut state, &orders);
    }
    outcome.individual = state;
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn order(phase: MedPhase, drug: &str) -> MedOrder {
        MedOrder {
            phase,
            drug: drug.to_string(),
        }
    }

    fn meds(list: &[&str]) -> IndividualProtocol {
        IndividualProtocol {
            current_meds: list.iter().map(|s| s.to_string()).collect(),
            ..IndividualProtocol::default()
        }
    }

    #[test]
    fn stop_order_removes_med() {
        let mut ip = meds(&["IV fluids"]);
        apply_med_orders(&mut ip, &[order(MedPhase::Stop, "IV fluids")]);
        assert!(ip.current_meds.is_empty());
    }

    #[test]
    fn last_order_wins() {
        let mut ip = meds(&[]);
        apply_med_orders(
            &mut ip,
            &[order(MedPhase::Start, "heparin"), order(MedPhase::Stop, "heparin"), order(MedPhase::Start, "insulin")],
        );
        assert_eq!(ip.current_meds, vec!["insulin"]);
    }

    #[test]
    fn merge_preserves_missing_fields_and_moves_resolved() {
        let prior = IndividualProtocol {
            active_problems: vec!["suspected sepsis".into(), "AKI".into()],
            current_meds: vec!["IV fluids".into()],
            procedures: vec!["blood cultures".into()],
            trends: vec!["lactate high".into()],
            history: vec![],
        };
        let next = merge_state(&prior, &json!({"active_problems": ["suspected sepsis"], "trends": ["lactate falling"]}), &[], None);
        assert_eq!(next.active_problems, vec!["suspected sepsis"]);
        assert_eq!(next.history[0].item, "AKI");
        assert_eq!(next.current_meds, vec!["IV fluids"]);
        assert_eq!(next.procedures, vec!["blood cultures"]);
        assert_eq!(next.trends, vec!["lactate falling"]);
        assert_eq!(merge_state(&prior, &json!({}), &[], None), prior);
    }

    #[test]
    fn wrapped_state_and_object_items() {
        let reply = json!({"updated_state": {"current_meds": [{"name": "heparin", "dose": "5000u"}], "trajectory": ["x up"]}});
        let next = merge_state(&IndividualProtocol::default(), &reply, &[], None);
        assert_eq!(next.current_meds, vec!["heparin"]);
        assert_eq!(next.trends, vec!["x up"]);
    }

    #[test]
    fn meds_leave_only_through_stops() {
        let prior = meds(&["IV fluids", "heparin"]);
        let next = merge_state(&prior, &json!({"current_meds": []}), &[order(MedPhase::Stop, "heparin")], None);
        assert_eq!(next.current_meds, vec!["IV fluids"]);
    }
}
