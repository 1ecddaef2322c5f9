use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, ChatRequest, ChatResponse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Full chat-completions endpoint, e.g. `http://localhost:8000/v1/chat/completions`.
    pub endpoint: String,
    pub model: String,
    /// Bearer token; never serialized.
    #[serde(skip)]
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".to_string(),
            model: "default".to_string(),
            api_key: None,
            timeout_secs: 60,
            max_attempts: 3,
            backoff_ms: 500,
        }
    }
}

pub fn encode_request(model: &str, req: &ChatRequest) -> Value {
    let mut body = json!({
        "model": model,
        "messages": [{"role": "user", "content": req.rendered_prompt}],
        "max_tokens": req.max_output_tokens,
        "temperature": req.decode_temperature,
    });
    if req.want_logprobs {
        body["logprobs"] = Value::Bool(true);
    }
    body
}

/// Reply text and per-token logprobs from a chat-completions body.
pub fn decode_response(body: &Value) -> Result<(String, Option<Vec<f64>>), BackendError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::MalformedBackendReply("missing choices[0]".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::MalformedBackendReply("missing message.content".into()))?
        .to_string();
    let logprobs = choice
        .pointer("/logprobs/content")
        .and_then(Value::as_array)
        .map(|toks| toks.iter().filter_map(|t| t.get("logprob").and_then(Value::as_f64)).collect::<Vec<_>>())
        .filter(|v| !v.is_empty());
    Ok((text, logprobs))
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        if config.endpoint.trim().is_empty() {
            return Err(BackendError::Config("empty endpoint".into()));
        }
        if config.max_attempts == 0 {
            return Err(BackendError::Config("max_attempts must be positive".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend { config, agent })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn attempt(&self, body: &Value) -> Result<Value, Attempt> {
        let mut call = self.agent.post(&self.config.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call.send_json(body).map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Attempt::Retry(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("status {status}")));
        }
        if status >= 400 {
            return Err(Attempt::Fatal(BackendError::Rejected { status, body: text }));
        }
        serde_json::from_str(&text).map_err(|e| Attempt::Fatal(BackendError::MalformedBackendReply(e.to_string())))
    }
}

enum Attempt {
    Retry(String),
    Fatal(BackendError),
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let body = encode_request(&self.config.model, request);
        let started = Instant::now();
        let mut last = String::new();
        for attempt in 1..=self.config.max_attempts {
            match self.attempt(&body) {
                Ok(value) => {
                    let (text, token_logprobs) = decode_response(&value)?;
                    return Ok(ChatResponse {
                        text,
                        token_logprobs,
                        backend_name: self.config.model.clone(),
                        latency_ms: started.elapsed().as_millis() as u64,
                    });
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(reason)) => {
                    tracing::warn!(attempt, %reason, "backend call failed");
                    last = reason;
                    if attempt < self.config.max_attempts {
                        std::thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1)));
                    }
                }
            }
        }
        Err(BackendError::BackendUnreachable {
            attempts: self.config.max_attempts,
            reason: last,
        })
    }
}
