//! Blocking JSON-over-HTTP plumbing shared by the remote providers.

use std::thread;
use std::time::Duration;

use serde_json::Value;

pub(crate) const DEFAULT_ATTEMPTS: u32 = 3;
pub(crate) const DEFAULT_BACKOFF_BASE: Duration = Duration::from_millis(500);

#[derive(Debug)]
pub(crate) struct RetryExhausted {
    pub attempts: u32,
    pub message: String,
}

pub(crate) enum Failure {
    /// Connection errors, 429 and 5xx.
    Transient(String),
    /// Auth failures and malformed responses; retrying will not help.
    Fatal(String),
}

#[derive(Debug, Clone)]
pub(crate) struct RetryPolicy {
    pub attempts: u32,
    pub base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: DEFAULT_ATTEMPTS,
            base: DEFAULT_BACKOFF_BASE,
        }
    }
}

impl RetryPolicy {
    /// Runs `op` up to `attempts` times, sleeping `base * 2^i` between tries.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, Failure>) -> Result<T, RetryExhausted> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op() {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(message)) => {
                    return Err(RetryExhausted {
                        attempts: attempt,
                        message,
                    })
                }
                Err(Failure::Transient(message)) => {
                    if attempt >= self.attempts {
                        return Err(RetryExhausted {
                            attempts: attempt,
                            message,
                        });
                    }
                    let delay = self.base * 2u32.pow(attempt - 1);
                    tracing::warn!(attempt, ?delay, %message, "provider call failed, retrying");
                    thread::sleep(delay);
                }
            }
        }
    }
}

pub(crate) struct JsonClient {
    http: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
}

impl JsonClient {
    pub fn new(endpoint: String, api_key: Option<String>, timeout: Duration) -> Result<Self, String> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| e.to_string())?;
        Ok(Self {
            http,
            endpoint,
            api_key,
        })
    }

    pub fn post(&self, body: &Value) -> Result<Value, Failure> {
        let mut req = self.http.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| Failure::Transient(format!("request to {} failed: {e}", self.endpoint)))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| Failure::Transient(format!("reading response body: {e}")))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Failure::Transient(format!("{status}: {}", excerpt(&text))));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(format!("{status}: {}", excerpt(&text))));
        }
        serde_json::from_str(&text).map_err(|e| Failure::Fatal(format!("invalid JSON response: {e}")))
    }
}

fn excerpt(s: &str) -> &str {
    match s.char_indices().nth(200) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
