//! Chat-completion backends shared by every agent role.
//!
//! A [`Backend`] turns a rendered prompt into text plus optional per-token
//! log-probabilities. [`MockBackend`] replays a script for offline runs;
//! [`HttpBackend`] speaks the common chat-completions wire format.

mod http;
mod json;
mod mock;
mod templates;

pub use http::{decode_response, encode_request, HttpBackend, HttpConfig};
pub use json::{extract_json, JsonError};
pub use mock::{MockBackend, MockEntry, MockMatch, MockScript, DEFAULT_MOCK_LOGPROB};
pub use templates::{render_template, template_slots, TemplateError, TemplateSet};

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TemplateId {
    Reflector,
    Router,
    Reasoner,
    Auditor,
    Steward,
    /// Plan-level equivalence judge used by the evaluation harness.
    Judge,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::Reflector,
        TemplateId::Router,
        TemplateId::Reasoner,
        TemplateId::Auditor,
        TemplateId::Steward,
        TemplateId::Judge,
    ];

    pub fn file_stem(self) -> &'static str {
        match self {
            TemplateId::Reflector => "reflector",
            TemplateId::Router => "router",
            TemplateId::Reasoner => "reasoner",
            TemplateId::Auditor => "auditor",
            TemplateId::Steward => "steward",
            TemplateId::Judge => "judge",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub template_id: TemplateId,
    pub rendered_prompt: String,
    pub max_output_tokens: u32,
    pub want_logprobs: bool,
    pub decode_temperature: f64,
}

impl ChatRequest {
    pub fn new(template_id: TemplateId, rendered_prompt: impl Into<String>) -> Self {
        ChatRequest {
            template_id,
            rendered_prompt: rendered_prompt.into(),
            max_output_tokens: 512,
            want_logprobs: true,
            decode_temperature: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.rendered_prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    /// Natural-log token probabilities, each `<= 0`.
    pub token_logprobs: Option<Vec<f64>>,
    pub backend_name: String,
    pub latency_ms: u64,
}

impl ChatResponse {
    pub fn logprobs(&self) -> Result<&[f64], BackendError> {
        match &self.token_logprobs {
            Some(lp) if !lp.is_empty() => Ok(lp),
            _ => Err(BackendError::LogprobsUnavailable),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend unreachable after {attempts} attempt(s): {reason}")]
    BackendUnreachable { attempts: u32, reason: String },
    #[error("backend rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed backend reply: {0}")]
    MalformedBackendReply(String),
    #[error("backend returned no log-probabilities")]
    LogprobsUnavailable,
    #[error("configuration: {0}")]
    Config(String),
}

/// A chat-completion provider. Implementations are internally synchronized;
/// concurrent calls from distinct trajectories are allowed.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }
}

/// Wraps a backend and counts calls per template.
pub struct Metered<B> {
    inner: B,
    calls: Mutex<BTreeMap<TemplateId, u64>>,
}

impl<B: Backend> Metered<B> {
    pub fn new(inner: B) -> Self {
        Metered {
            inner,
            calls: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn calls(&self, id: TemplateId) -> u64 {
        self.calls.lock().unwrap().get(&id).copied().unwrap_or(0)
    }

    pub fn snapshot(&self) -> BTreeMap<TemplateId, u64> {
        self.calls.lock().unwrap().clone()
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: Backend> Backend for Metered<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        *self.calls.lock().unwrap().entry(request.template_id).or_default() += 1;
        self.inner.complete(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_prompt_rejected_locally() {
        let req = ChatRequest::new(TemplateId::Router, "   ");
        assert!(matches!(req.validate(), Err(BackendError::InvalidRequest(_))));
        let mock = MockBackend::new(MockScript::default());
        assert!(matches!(mock.complete(&req), Err(BackendError::InvalidRequest(_))));
        assert!(mock.requests().is_empty());
    }

    #[test]
    fn metered_counts_per_template() {
        let m = Metered::new(MockBackend::new(MockScript::default()));
        m.complete(&ChatRequest::new(TemplateId::Router, "x")).unwrap();
        m.complete(&ChatRequest::new(TemplateId::Router, "y")).unwrap();
        m.complete(&ChatRequest::new(TemplateId::Steward, "z")).unwrap();
        assert_eq!(m.calls(TemplateId::Router), 2);
        assert_eq!(m.calls(TemplateId::Reflector), 0);
        assert_eq!(m.snapshot().len(), 2);
    }

    #[test]
    fn missing_logprobs_is_an_error_on_access() {
        let r = ChatResponse {
            text: "{}".into(),
            token_logprobs: None,
            backend_name: "t".into(),
            latency_ms: 0,
        };
        assert_eq!(r.logprobs(), Err(BackendError::LogprobsUnavailable));
    }
}
