use std::time::Duration;

use serde_json::{json, Value};

use super::{EmbedError, EmbeddingProvider, ProviderKind};
use crate::http::{Failure, JsonClient, RetryPolicy};

pub const ENV_ENDPOINT: &str = "RAGFORGE_EMBED_ENDPOINT";
pub const ENV_MODEL: &str = "RAGFORGE_EMBED_MODEL";
pub const ENV_API_KEY: &str = "RAGFORGE_EMBED_API_KEY";

#[derive(Debug, Clone)]
pub struct RemoteEmbedderConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub dimension: usize,
    pub max_input_chars: usize,
    pub batch_size: usize,
    pub timeout: Duration,
}

impl Default for RemoteEmbedderConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/embeddings".to_string(),
            model: "text-embedding-3-large".to_string(),
            api_key: None,
            dimension: 3072,
            max_input_chars: 8000,
            batch_size: 64,
            timeout: Duration::from_secs(60),
        }
    }
}

impl RemoteEmbedderConfig {
    /// Defaults overlaid with the `RAGFORGE_EMBED_*` environment variables.
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

/// Embeddings API client. Requests are `{"model", "input": [..]}`; both the
/// OpenAI shape (`data[].embedding` with `index`) and a bare
/// `embeddings: [[..]]` response are accepted.
pub struct RemoteEmbedder {
    cfg: RemoteEmbedderConfig,
    provider_id: String,
    client: JsonClient,
    retry: RetryPolicy,
}

impl RemoteEmbedder {
    pub fn new(cfg: RemoteEmbedderConfig) -> Result<Self, EmbedError> {
        let provider_id = format!("remote:{}", cfg.model);
        let client = JsonClient::new(cfg.endpoint.clone(), cfg.api_key.clone(), cfg.timeout)
            .map_err(|message| EmbedError::ProviderUnavailable {
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

    fn embed_chunk(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let body = json!({ "model": self.cfg.model, "input": texts });
        self.retry
            .run(|| {
                let resp = self.client.post(&body)?;
                parse_embeddings(&resp, texts.len()).map_err(Failure::Fatal)
            })
            .map_err(|e| EmbedError::ProviderUnavailable {
                provider: self.provider_id.clone(),
                attempts: e.attempts,
                message: e.message,
            })
    }
}

fn parse_embeddings(resp: &Value, expected: usize) -> Result<Vec<Vec<f32>>, String> {
    let rows: Vec<(usize, &Value)> = if let Some(data) = resp.get("data").and_then(Value::as_array) {
        data.iter()
            .enumerate()
            .map(|(i, item)| {
                let idx = item.get("index").and_then(Value::as_u64).map_or(i, |x| x as usize);
                (idx, item.get("embedding").unwrap_or(&Value::Null))
            })
            .collect()
    } else if let Some(list) = resp.get("embeddings").and_then(Value::as_array) {
        list.iter().enumerate().collect()
    } else {
        return Err("response has neither `data` nor `embeddings`".to_string());
    };
    if rows.len() != expected {
        return Err(format!("expected {expected} embeddings, got {}", rows.len()));
    }
    let mut out = vec![Vec::new(); expected];
    for (idx, v) in rows {
        let arr = v.as_array().ok_or("embedding is not an array")?;
        let vec = arr
            .iter()
            .map(|x| x.as_f64().map(|f| f as f32).ok_or("non-numeric embedding value"))
            .collect::<Result<Vec<f32>, _>>()?;
        *out.get_mut(idx).ok_or("embedding index out of range")? = vec;
    }
    Ok(out)
}

impl EmbeddingProvider for RemoteEmbedder {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn dimension(&self) -> usize {
        self.cfg.dimension
    }

    fn kind(&self) -> ProviderKind {
        ProviderKind::Remote
    }

    fn max_input_chars(&self) -> Option<usize> {
        Some(self.cfg.max_input_chars)
    }

    fn embed_raw(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.cfg.batch_size.max(1)) {
            out.extend(self.embed_chunk(batch)?);
        }
        Ok(out)
    }
}
