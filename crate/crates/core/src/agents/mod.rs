//! The online loop: Router, Reasoner, Auditor and Steward composed into a
//! single [`Engine::step`] over an [`InferenceState`](crate::memory::InferenceState).

mod auditor;
mod engine;
mod prompt;
mod reasoner;
mod risk;
mod router;
mod steward;

pub use auditor::{audit, parse_verdict, should_audit};
pub use engine::Engine;
pub use prompt::{bullet_list, fit_buffer, fit_individual, fit_rules, IndividualView};
pub use reasoner::{normalize_citation, parse_prediction, reason, uncertainty_from_logprobs};
pub use risk::RiskVocabulary;
pub use router::{route, RouteOutcome};
pub use steward::{apply_med_orders, merge_state, steward_update, StewardOutcome};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("invalid agent configuration: {0}")]
    Config(String),
}

/// Token allocations per prompt section, in the tokenizer's unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptBudgets {
    pub system: usize,
    pub rules: usize,
    pub individual: usize,
    pub buffer: usize,
}

impl Default for PromptBudgets {
    fn default() -> Self {
        PromptBudgets {
            system: 400,
            rules: 600,
            individual: 500,
            buffer: 1500,
        }
    }
}

impl PromptBudgets {
    pub fn total(&self) -> usize {
        self.system + self.rules + self.individual + self.buffer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub tau_uncertainty: f64,
    /// Buffer size (tokens) above which the Steward compresses state.
    pub l_limit: usize,
    pub budgets: PromptBudgets,
    pub max_candidates: usize,
    /// Predicted actions retained for scoring.
    pub max_actions: usize,
    /// Lookback for the Router's trigger prefilter.
    pub router_lookback_hours: i64,
    pub max_output_tokens: u32,
    pub decode_temperature: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            tau_uncertainty: 0.7,
            l_limit: 1500,
            budgets: PromptBudgets::default(),
            max_candidates: 3,
            max_actions: 5,
            router_lookback_hours: 6,
            max_output_tokens: 512,
            decode_temperature: 0.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.tau_uncertainty.is_nan() || self.tau_uncertainty < 0.0 {
            return Err(AgentError::Config("tau_uncertainty must be >= 0".into()));
        }
        let b = &self.budgets;
        if b.system == 0 || b.rules == 0 || b.individual == 0 || b.buffer == 0 {
            return Err(AgentError::Config("prompt budgets must be positive".into()));
        }
        if self.max_actions == 0 || self.max_output_tokens == 0 {
            return Err(AgentError::Config("max_actions and max_output_tokens must be positive".into()));
        }
        if self.router_lookback_hours < 0 {
            return Err(AgentError::Config("router_lookback_hours must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BundleType {
    #[serde(rename = "MEDICATIONS", alias = "Medications", alias = "medications")]
    Medications,
    #[serde(rename = "LABS", alias = "Labs", alias = "labs")]
    Labs,
    #[serde(rename = "PROCEDURES", alias = "Procedures", alias = "procedures")]
    Procedures,
}

impl BundleType {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MEDICATIONS" | "MEDICATION" => Some(BundleType::Medications),
            "LABS" | "LAB" => Some(BundleType::Labs),
            "PROCEDURES" | "PROCEDURE" => Some(BundleType::Procedures),
            _ => None,
        }
    }
}

/// Reasoner output for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub thought: String,
    pub bundle_type: Option<BundleType>,
    pub actions: Vec<String>,
    /// Canonical `R-<rule id>` / `S-<nn>` ids.
    pub citations: Vec<String>,
    /// `-mean(logprob)`; infinite when no logprobs were returned.
    #[serde(with = "finite_or_null")]
    pub uncertainty: f64,
    pub raw_logprobs: Vec<f64>,
    #[serde(default)]
    pub abstained: bool,
}

impl Prediction {
    pub fn abstain() -> Self {
        Prediction {
            thought: String::new(),
            bundle_type: None,
            actions: Vec::new(),
            citations: Vec::new(),
            uncertainty: f64::INFINITY,
            raw_logprobs: Vec::new(),
            abstained: true,
        }
    }

    /// Rule ids among the citations, without the `R-` prefix.
    pub fn cited_rule_ids(&self) -> impl Iterator<Item = &str> {
        self.citations.iter().filter_map(|c| c.strip_prefix("R-"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriggerReason {
    None,
    Uncertainty,
    SafetyVocab,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuditStatus {
    Pass,
    Fail,
    NotRun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RiskLevel {
    Low,
    High,
    NotRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditVerdict {
    pub triggered: bool,
    pub trigger_reason: TriggerReason,
    pub status: AuditStatus,
    pub risk_level: RiskLevel,
    pub critique: String,
    pub corrected_actions: Option<Vec<String>>,
}

impl AuditVerdict {
    pub fn not_run() -> Self {
        AuditVerdict {
            triggered: false,
            trigger_reason: TriggerReason::None,
            status: AuditStatus::NotRun,
            risk_level: RiskLevel::NotRun,
            critique: String::new(),
            corrected_actions: None,
        }
    }
}

/// Serializes non-finite values as `null` and reads `null` back as `+inf`.
pub mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}
