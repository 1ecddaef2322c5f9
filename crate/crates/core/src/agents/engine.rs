use std::collections::BTreeMap;

use super::auditor::{audit_traced, should_audit};
use super::reasoner::reason_traced;
use super::risk::RiskVocabulary;
use super::router::route;
use super::steward::steward_update;
use super::{AgentConfig, AgentError, AuditStatus, AuditVerdict};
use crate::backend::{Backend, ChatRequest, ChatResponse, TemplateId, TemplateSet};
use crate::bundler::{bundle_text, EventBundle};
use crate::eval::{StepTrace, TRACE_SCHEMA_VERSION};
use crate::ingest::StayId;
use crate::memory::{BufferEntry, GlobalRule, InferenceState, Tokenizer, WhitespaceTokenizer};

/// Appended to a prompt when its reply could not be parsed.
pub(crate) const REASK_SUFFIX: &str = "\n\nReturn ONLY the JSON object described above.";

const ONLINE_TEMPLATES: [TemplateId; 4] = [TemplateId::Router, TemplateId::Reasoner, TemplateId::Auditor, TemplateId::Steward];

pub(crate) struct Reply<T> {
    pub value: Option<T>,
    pub response: Option<ChatResponse>,
    pub attempts: usize,
    /// Largest prompt sent.
    pub prompt_tokens: usize,
    pub error: Option<String>,
}

/// The four online roles bound to one backend and configuration.
pub struct Engine<'a> {
    backend: &'a dyn Backend,
    templates: TemplateSet,
    pub config: AgentConfig,
    pub risk: RiskVocabulary,
    tokenizer: Box<dyn Tokenizer>,
    shell_tokens: BTreeMap<TemplateId, usize>,
}

impl<'a> Engine<'a> {
    pub fn new(backend: &'a dyn Backend, config: AgentConfig) -> Result<Self, AgentError> {
        Self::with_parts(backend, config, TemplateSet::default(), RiskVocabulary::default(), Box::new(WhitespaceTokenizer))
    }

    pub fn with_parts(
        backend: &'a dyn Backend,
        config: AgentConfig,
        templates: TemplateSet,
        risk: RiskVocabulary,
        tokenizer: Box<dyn Tokenizer>,
    ) -> Result<Self, AgentError> {
        config.validate()?;
        let reask = tokenizer.count(REASK_SUFFIX);
        let mut shell_tokens = BTreeMap::new();
        for id in TemplateId::ALL {
            let n = tokenizer.count(&templates.shell(id));
            if ONLINE_TEMPLATES.contains(&id) && n + reask > config.budgets.system {
                return Err(AgentError::Config(format!(
                    "{id} template needs {} tokens, system budget is {}",
                    n + reask,
                    config.budgets.system
                )));
            }
            shell_tokens.insert(id, n);
        }
        Ok(Engine {
            backend,
            templates,
            config,
            risk,
            tokenizer,
            shell_tokens,
        })
    }

    pub fn backend(&self) -> &'a dyn Backend {
        self.backend
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    pub fn shell_tokens(&self, id: TemplateId) -> usize {
        self.shell_tokens[&id]
    }

    pub(crate) fn render(&self, id: TemplateId, bindings: &BTreeMap<&str, String>) -> String {
        self.templates.render(id, bindings).expect("role bindings cover every template slot")
    }

    /// Call the backend and parse the reply, re-asking once on a parse
    /// failure when `reask` is set. Transport errors are not re-asked.
    pub(crate) fn ask<T>(&self, id: TemplateId, prompt: String, reask: bool, parse: impl Fn(&str) -> Result<T, String>) -> Reply<T> {
        let mut reply = Reply {
            value: None,
            response: None,
            attempts: 0,
            prompt_tokens: 0,
            error: None,
        };
        let mut prompt = prompt;
        for attempt in 0..if reask { 2 } else { 1 } {
            if attempt == 1 {
                prompt.push_str(REASK_SUFFIX);
            }
            reply.prompt_tokens = reply.prompt_tokens.max(self.tokenizer.count(&prompt));
            reply.attempts += 1;
            let req = ChatRequest {
                template_id: id,
                rendered_prompt: prompt.clone(),
                max_output_tokens: self.config.max_output_tokens,
                want_logprobs: id == TemplateId::Reasoner,
                decode_temperature: self.config.decode_temperature,
            };
            match self.backend.complete(&req) {
                Ok(resp) => match parse(&resp.text) {
                    Ok(v) => {
                        reply.value = Some(v);
                        reply.response = Some(resp);
                        reply.error = None;
                        return reply;
                    }
                    Err(e) => reply.error = Some(e),
                },
                Err(e) => {
                    tracing::warn!(template = %id, error = %e, "backend call failed");
                    reply.error = Some(e.to_string());
                    return reply;
                }
            }
        }
        reply
    }

    /// One timestep: route, reason, conditionally audit, buffer the bundle
    /// and compress state when the buffer exceeds `l_limit`.
    pub fn step(&self, state: &mut InferenceState, stay_id: &StayId, t: usize, bundle: &EventBundle) -> StepTrace {
        let cfg = &self.config;
        let tok = self.tokenizer();
        let global = state.global.clone();
        let mut incidents = Vec::new();

        let text = tok.truncate(&bundle_text(bundle), cfg.budgets.buffer).to_string();
        let text_tokens = tok.count(&text);

        state.observe_recent(bundle, cfg.router_lookback_hours);
        let window: Vec<&EventBundle> = state.recent().collect();
        let routed = route(self, &window, &state.individual, &global);
        incidents.extend(routed.incident.clone());
        let rules: Vec<&GlobalRule> = routed.rule_ids.iter().filter_map(|id| global.get(id)).collect();

        let history: Vec<&str> = state.buffer().iter().map(|e| e.text.as_str()).chain([text.as_str()]).collect();
        let reasoned = reason_traced(self, &rules, &state.individual, &history);
        incidents.extend(reasoned.incident.clone());
        let prediction = reasoned.prediction;
        let mut prompt_tokens = reasoned.prompt_tokens;
        if let Some(n) = routed.prompt_tokens {
            prompt_tokens.insert("router".to_string(), n);
        }

        let citation_valid = prediction.citations.iter().all(|c| match c.strip_prefix("R-") {
            Some(id) => routed.rule_ids.iter().any(|r| r == id),
            None => reasoned.state_ids.contains(c),
        });

        let (triggered, reason) = should_audit(&prediction, cfg.tau_uncertainty, &self.risk);
        let verdict = if triggered {
            let out = audit_traced(self, &prediction, reason, &rules, &state.individual);
            prompt_tokens.insert("auditor".to_string(), out.prompt_tokens);
            incidents.extend(out.incident);
            out.verdict
        } else {
            AuditVerdict::not_run()
        };
        let final_actions = match (&verdict.status, &verdict.corrected_actions) {
            (AuditStatus::Fail, Some(corrected)) => corrected.clone(),
            _ => prediction.actions.clone(),
        };

        state.buffer_push(BufferEntry::from_bundle(bundle, &text, text_tokens));
        let mut steward_ran = false;
        if state.buffer_tokens() > cfg.l_limit {
            let flushed = state.flush_buffer();
            let out = steward_update(self, &state.individual, &flushed);
            state.individual = out.individual;
            prompt_tokens.insert("steward".to_string(), out.prompt_tokens);
            incidents.extend(out.incidents);
            steward_ran = true;
        }
        let max = prompt_tokens
            .iter()
            .filter(|(k, _)| matches!(k.as_str(), "total" | "router" | "auditor" | "steward"))
            .map(|(_, v)| *v)
            .max()
            .unwrap_or(0);
        prompt_tokens.insert("max".to_string(), max);

        StepTrace {
            schema_version: TRACE_SCHEMA_VERSION,
            stay_id: stay_id.clone(),
            t,
            bundle_type_truth: None,
            truth_actions: Vec::new(),
            scored: false,
            recall_at_5: None,
            prediction,
            final_actions,
            verdict,
            activated_rule_ids: routed.rule_ids,
            router_called: routed.backend_called,
            citation_valid,
            prompt_tokens,
            state_hash: state.individual.state_hash(),
            state: state.individual.clone(),
            steward_ran,
            incidents,
            equivalence: None,
        }
    }

    /// End of trajectory: absorb whatever remains in the buffer and refresh
    /// the last trace's state snapshot.
    pub fn finish(&self, state: &mut InferenceState, last: Option<&mut StepTrace>) {
        if state.buffer().is_empty() {
            return;
        }
        let flushed = state.flush_buffer();
        let out = steward_update(self, &state.individual, &flushed);
        state.individual = out.individual;
        if let Some(trace) = last {
            trace.state = state.individual.clone();
            trace.state_hash = state.individual.state_hash();
            trace.steward_ran = true;
            trace.incidents.extend(out.incidents);
            let steward = trace.prompt_tokens.entry("steward".to_string()).or_default();
            *steward = (*steward).max(out.prompt_tokens);
            let steward = *steward;
            let max = trace.prompt_tokens.entry("max".to_string()).or_default();
            *max = (*max).max(steward);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockScript};
    use crate::memory::GlobalProtocol;

    #[test]
    fn shells_fit_default_system_budget() {
        let mock = MockBackend::new(MockScript::default());
        let engine = Engine::new(&mock, AgentConfig::default()).unwrap();
        for id in ONLINE_TEMPLATES {
            assert!(engine.shell_tokens(id) < 400);
        }
        let tight = AgentConfig {
            budgets: crate::agents::PromptBudgets {
                system: 50,
                ..Default::default()
            },
            ..AgentConfig::default()
        };
        assert!(Engine::new(&mock, tight).is_err());
    }

    #[test]
    fn single_bundle_under_budget_skips_steward() {
        use crate::bundler::{build_bundles, BundlerConfig};
        use crate::ingest::ClinicalEvent;
        use chrono::TimeZone;
        let mock = MockBackend::new(MockScript::default());
        let engine = Engine::new(&mock, AgentConfig::default()).unwrap();
        let ts = chrono::Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        let stay = StayId::from("s");
        let e = ClinicalEvent::lab(stay.clone(), ts, "Sodium", 140.0, Some(135.0), Some(145.0)).unwrap();
        let b = build_bundles(&[e], &BundlerConfig::default()).unwrap().remove(0);
        let mut state = InferenceState::new(std::sync::Arc::new(GlobalProtocol::new()));
        let trace = engine.step(&mut state, &stay, 0, &b);
        assert!(!trace.steward_ran);
        assert!(mock.requests().iter().all(|r| r.template_id != TemplateId::Steward));
        // Unscripted mock reply "{}" lacks predicted_actions: abstain, audit fails open.
        assert!(trace.prediction.abstained);
        assert!(trace.verdict.triggered);
        assert_eq!(state.buffer().len(), 1);
    }
}
