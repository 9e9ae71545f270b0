//! Text generation providers.

mod json_list;
mod mock;
mod remote;

use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use json_list::{parse_json_list, render_json_list, JsonListError};
pub use mock::{MockLlm, MOCK_PROVIDER_ID};
pub use remote::{RemoteLlm, RemoteLlmConfig};

pub const DEFAULT_MAX_TOKENS: u32 = 200;
pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_MAX_PROMPT_CHARS: usize = 48_000;
pub const DEFAULT_CONCURRENCY: usize = 4;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("LLM provider {provider} unavailable after {attempts} attempt(s): {message}")]
    ProviderUnavailable {
        provider: String,
        attempts: u32,
        message: String,
    },
    #[error("prompt has {chars} characters, limit is {limit}")]
    PromptTooLarge { chars: usize, limit: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub model: String,
}

impl LlmRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            model: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.prompt.is_empty() {
            return Err(LlmError::InvalidRequest("prompt is empty".into()));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(LlmError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub prompt_digest: String,
    pub provider_id: String,
    pub latency_ms: u64,
    pub finish_reason: FinishReason,
}

/// What a provider returns before the client adds bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub finish_reason: FinishReason,
}

pub trait LlmProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn complete(&self, req: &LlmRequest) -> Result<Completion, LlmError>;
    /// Model name used when a request leaves `model` empty.
    fn default_model(&self) -> &str {
        ""
    }
}

/// Validating, rate-capped front-end over an [`LlmProvider`].
#[derive(Clone)]
pub struct Llm {
    provider: Arc<dyn LlmProvider>,
    max_prompt_chars: usize,
    slots: Arc<Slots>,
}

impl std::fmt::Debug for Llm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Llm")
            .field("provider", &self.provider.provider_id())
            .field("max_prompt_chars", &self.max_prompt_chars)
            .finish()
    }
}

struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().expect("slot lock poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("slot lock poisoned");
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("slot lock poisoned") += 1;
        self.0.cv.notify_one();
    }
}

impl Llm {
    pub fn new(provider: Arc<dyn LlmProvider>) -> Self {
        Self {
            provider,
            max_prompt_chars: DEFAULT_MAX_PROMPT_CHARS,
            slots: Arc::new(Slots {
                free: Mutex::new(DEFAULT_CONCURRENCY),
                cv: Condvar::new(),
            }),
        }
    }

    pub fn mock() -> Self {
        Self::new(Arc::new(MockLlm::new()))
    }

    pub fn with_max_prompt_chars(mut self, limit: usize) -> Self {
        self.max_prompt_chars = limit;
        self
    }

    pub fn with_concurrency(mut self, cap: usize) -> Self {
        self.slots = Arc::new(Slots {
            free: Mutex::new(cap.max(1)),
            cv: Condvar::new(),
        });
        self
    }

    pub fn provider_id(&self) -> &str {
        self.provider.provider_id()
    }

    pub fn default_model(&self) -> &str {
        self.provider.default_model()
    }

    pub fn generate(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError> {
        req.validate()?;
        let chars = req.prompt.chars().count();
        if chars > self.max_prompt_chars {
            return Err(LlmError::PromptTooLarge {
                chars,
                limit: self.max_prompt_chars,
            });
        }
        let _slot = self.slots.acquire();
        let started = Instant::now();
        let completion = self.provider.complete(req)?;
        Ok(LlmResponse {
            text: completion.text,
            prompt_digest: crate::fsutil::sha256_hex(req.prompt.as_bytes()),
            provider_id: self.provider.provider_id().to_string(),
            latency_ms: started.elapsed().as_millis() as u64,
            finish_reason: completion.finish_reason,
        })
    }
}
