use std::time::Duration;

use serde_json::{json, Value};

use super::{Completion, FinishReason, LlmError, LlmProvider, LlmRequest};
use crate::http::{Failure, JsonClient, RetryPolicy};

pub const ENV_ENDPOINT: &str = "RAGFORGE_LLM_ENDPOINT";
pub const ENV_MODEL: &str = "RAGFORGE_LLM_MODEL";
pub const ENV_API_KEY: &str = "RAGFORGE_LLM_API_KEY";

#[derive(Debug, Clone)]
pub struct RemoteLlmConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl Default for RemoteLlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".to_string(),
            model: "gpt-4o-mini".to_string(),
            api_key: None,
            timeout: Duration::from_secs(120),
        }
    }
}

impl RemoteLlmConfig {
    pub fn from_env() -> Self {
        let mut cfg = Self::default();
        if let Ok(v) = std::env::var(ENV_ENDPOINT) {
            cfg.endpoint = v;
        }
        if let Ok(v) = std::env::var(ENV_MODEL) {
            cfg.model = v;
        }
        cfg.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        cfg
    }
}

/// OpenAI-compatible chat-completions client (single user message).
pub struct RemoteLlm {
    cfg: RemoteLlmConfig,
    provider_id: String,
    client: JsonClient,
    retry: RetryPolicy,
}

impl RemoteLlm {
    pub fn new(cfg: RemoteLlmConfig) -> Result<Self, LlmError> {
        let provider_id = format!("remote:{}", cfg.model);
        let client = JsonClient::new(cfg.endpoint.clone(), cfg.api_key.clone(), cfg.timeout)
            .map_err(|message| LlmError::ProviderUnavailable {
                provider: provider_id.clone(),
                attempts: 0,
                message,
            })?;
        Ok(Self {
            cfg,
            provider_id,
            client,
            retry: RetryPolicy::default(),
        })
    }
}

pub(crate) fn request_body(req: &LlmRequest, default_model: &str) -> Value {
    let model = if req.model.is_empty() {
        default_model
    } else {
        &req.model
    };
    json!({
        "model": model,
        "messages": [{"role": "user", "content": req.prompt}],
        "max_tokens": req.max_tokens,
        "temperature": req.temperature,
    })
}

pub(crate) fn parse_completion(resp: &Value) -> Result<Completion, String> {
    let choice = resp
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or("response has no choices")?;
    let text = choice
        .pointer("/message/content")
        .or_else(|| choice.get("text"))
        .and_then(Value::as_str)
        .ok_or("choice has no text content")?
        .to_string();
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("length") => FinishReason::Length,
        Some("stop") | None => FinishReason::Stop,
        Some(_) => FinishReason::Error,
    };
    Ok(Completion {
        text,
        finish_reason,
    })
}

impl LlmProvider for RemoteLlm {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn default_model(&self) -> &str {
        &self.cfg.model
    }

    fn complete(&self, req: &LlmRequest) -> Result<Completion, LlmError> {
        let body = request_body(req, &self.cfg.model);
        self.retry
            .run(|| {
                let resp = self.client.post(&body)?;
                parse_completion(&resp).map_err(Failure::Fatal)
            })
            .map_err(|e| LlmError::ProviderUnavailable {
                provider: self.provider_id.clone(),
                attempts: e.attempts,
                message: e.message,
            })
    }
}
