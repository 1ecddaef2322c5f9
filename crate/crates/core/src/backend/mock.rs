use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Backend, BackendError, ChatRequest, ChatResponse, TemplateId};

/// Per-token log-probability attached to scripted replies that do not
/// specify their own.
pub const DEFAULT_MOCK_LOGPROB: f64 = -0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Needles {
    One(String),
    Many(Vec<String>),
}

impl Needles {
    fn all_in(&self, haystack: &str) -> bool {
        match self {
            Needles::One(s) => haystack.contains(s.as_str()),
            Needles::Many(v) => v.iter().all(|s| haystack.contains(s.as_str())),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockMatch {
    #[serde(default)]
    pub template: Option<TemplateId>,
    #[serde(default)]
    pub contains: Option<Needles>,
}

impl MockMatch {
    fn hits(&self, req: &ChatRequest) -> bool {
        self.template.is_none_or(|t| t == req.template_id)
            && self.contains.as_ref().is_none_or(|n| n.all_in(&req.rendered_prompt))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    #[serde(default, rename = "match")]
    pub matcher: MockMatch,
    #[serde(default)]
    pub response_text: Option<String>,
    /// A JSON reply; serialized compactly when `response_text` is absent.
    #[serde(default)]
    pub response: Option<Value>,
    #[serde(default)]
    pub logprobs: Option<Vec<f64>>,
    #[serde(default)]
    pub logprobs_unavailable: bool,
    /// Fallback entry, consulted only when nothing else matches.
    #[serde(default)]
    pub default: bool,
}

impl MockEntry {
    pub fn reply(template: TemplateId, contains: &[&str], response: Value) -> Self {
        MockEntry {
            matcher: MockMatch {
                template: Some(template),
                contains: Some(Needles::Many(contains.iter().map(|s| s.to_string()).collect())),
            },
            response: Some(response),
            ..MockEntry::default()
        }
    }

    pub fn text(template: TemplateId, contains: &[&str], text: impl Into<String>) -> Self {
        MockEntry {
            matcher: MockMatch {
                template: Some(template),
                contains: Some(Needles::Many(contains.iter().map(|s| s.to_string()).collect())),
            },
            response_text: Some(text.into()),
            ..MockEntry::default()
        }
    }

    pub fn fallback(template: TemplateId, response: Value) -> Self {
        MockEntry {
            matcher: MockMatch {
                template: Some(template),
                contains: None,
            },
            response: Some(response),
            default: true,
            ..MockEntry::default()
        }
    }

    pub fn with_logprobs(mut self, logprobs: Vec<f64>) -> Self {
        self.logprobs = Some(logprobs);
        self
    }

    pub fn without_logprobs(mut self) -> Self {
        self.logprobs_unavailable = true;
        self
    }

    fn body(&self) -> String {
        match (&self.response_text, &self.response) {
            (Some(t), _) => t.clone(),
            (None, Some(v)) => v.to_string(),
            (None, None) => "{}".to_string(),
        }
    }
}

/// Ordered reply table; the first matching non-default entry wins.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub entries: Vec<MockEntry>,
}

impl MockScript {
    pub fn new(entries: Vec<MockEntry>) -> Self {
        MockScript { entries }
    }

    pub fn push(&mut self, entry: MockEntry) {
        self.entries.push(entry);
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, BackendError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let e: MockEntry = serde_json::from_str(line)
                .map_err(|e| BackendError::Config(format!("mock script line {}: {e}", i + 1)))?;
            entries.push(e);
        }
        Ok(MockScript { entries })
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("mock script {}: {e}", path.display())))?;
        Self::parse_jsonl(&text)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("mock entry serializes"));
            out.push('\n');
        }
        out
    }

    fn lookup(&self, req: &ChatRequest) -> Option<&MockEntry> {
        self.entries
            .iter()
            .find(|e| !e.default && e.matcher.hits(req))
            .or_else(|| self.entries.iter().find(|e| e.default && e.matcher.hits(req)))
    }
}

/// Replays a [`MockScript`]. Replies depend only on the request, so runs are
/// reproducible regardless of call order or concurrency.
pub struct MockBackend {
    script: MockScript,
    log: Mutex<Vec<ChatRequest>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        MockBackend {
            script,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().unwrap().clone()
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        self.log.lock().unwrap().push(request.clone());
        let entry = self.script.lookup(request);
        let text = entry.map(MockEntry::body).unwrap_or_else(|| "{}".to_string());
        let token_logprobs = match entry {
            Some(e) if e.logprobs_unavailable => None,
            _ if !request.want_logprobs => None,
            Some(MockEntry { logprobs: Some(lp), .. }) => Some(lp.clone()),
            _ => Some(vec![DEFAULT_MOCK_LOGPROB; text.split_whitespace().count().max(1)]),
        };
        Ok(ChatResponse {
            text,
            token_logprobs,
            backend_name: "mock".to_string(),
            latency_ms: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn req(t: TemplateId, p: &str) -> ChatRequest {
        ChatRequest::new(t, p)
    }

    #[test]
    fn first_match_wins_and_defaults_last() {
        let script = MockScript::new(vec![
            MockEntry::fallback(TemplateId::Reasoner, json!({"predicted_actions": []})),
            MockEntry::reply(TemplateId::Reasoner, &["Lactate"], json!({"predicted_actions": ["a"]})),
            MockEntry::reply(TemplateId::Reasoner, &["Lactate"], json!({"predicted_actions": ["b"]})),
        ]);
        let m = MockBackend::new(script);
        let r = m.complete(&req(TemplateId::Reasoner, "Lactate: 4.8")).unwrap();
        assert_eq!(r.text, r#"{"predicted_actions":["a"]}"#);
        let r = m.complete(&req(TemplateId::Reasoner, "nothing")).unwrap();
        assert_eq!(r.text, r#"{"predicted_actions":[]}"#);
        let r = m.complete(&req(TemplateId::Router, "Lactate")).unwrap();
        assert_eq!(r.text, "{}");
    }

    #[test]
    fn deterministic_replies() {
        let script = MockScript::new(vec![MockEntry::text(TemplateId::Auditor, &["x"], "PASS please")]);
        let a = MockBackend::new(script.clone());
        let b = MockBackend::new(script);
        for p in ["x", "y", "x y", "zzz"] {
            let ra = a.complete(&req(TemplateId::Auditor, p)).unwrap();
            let rb = b.complete(&req(TemplateId::Auditor, p)).unwrap();
            assert_eq!(ra, rb);
            assert_eq!(ra, a.complete(&req(TemplateId::Auditor, p)).unwrap());
        }
        assert_eq!(a.requests().len(), 8);
    }

    #[test]
    fn logprob_options() {
        let script = MockScript::new(vec![
            MockEntry::text(TemplateId::Reasoner, &["low"], "a b").with_logprobs(vec![-2.0, -1.0]),
            MockEntry::text(TemplateId::Reasoner, &["none"], "a b").without_logprobs(),
        ]);
        let m = MockBackend::new(script);
        assert_eq!(m.complete(&req(TemplateId::Reasoner, "low")).unwrap().token_logprobs, Some(vec![-2.0, -1.0]));
        assert_eq!(m.complete(&req(TemplateId::Reasoner, "none")).unwrap().token_logprobs, None);
        let r = m.complete(&req(TemplateId::Reasoner, "other")).unwrap();
        assert_eq!(r.token_logprobs, Some(vec![DEFAULT_MOCK_LOGPROB]));
    }

    #[test]
    fn jsonl_round_trip() {
        let text = concat!(
            "# comment\n",
            r#"{"match":{"template":"Router","contains":"Lactate"},"response":{"selected_protocol_ids":["S"]}}"#,
            "\n\n",
            r#"{"match":{"template":"Reasoner"},"response_text":"{}","default":true}"#,
            "\n"
        );
        let s = MockScript::parse_jsonl(text).unwrap();
        assert_eq!(s.entries.len(), 2);
        assert_eq!(MockScript::parse_jsonl(&s.to_jsonl()).unwrap(), s);
        assert!(matches!(MockScript::parse_jsonl("{nope"), Err(BackendError::Config(_))));
    }
}
