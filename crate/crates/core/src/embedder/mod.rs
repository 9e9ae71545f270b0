//! Text embeddings: providers, the cached batch front-end, and cosine.

mod cache;
mod local;
mod remote;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::EmbeddingCache;
pub use local::{LocalHashEmbedder, LOCAL_DIMENSION, LOCAL_PROVIDER_ID};
pub use remote::{RemoteEmbedder, RemoteEmbedderConfig};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding provider {provider} unavailable after {attempts} attempt(s): {message}")]
    ProviderUnavailable {
        provider: String,
        attempts: u32,
        message: String,
    },
    #[error("text at index {index} is empty")]
    EmptyText { index: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding cache I/O at {path}: {source}")]
    Cache {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Local,
    Remote,
}

/// A dense vector together with its Euclidean norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f32>,
    norm: f32,
}

impl Embedding {
    pub fn new(values: Vec<f32>) -> Self {
        let norm = l2_norm(&values) as f32;
        Self { values, norm }
    }

    /// Scales to unit length; zero vectors are returned unchanged.
    pub fn normalized(values: Vec<f32>) -> Self {
        let norm = l2_norm(&values);
        if norm == 0.0 {
            return Self::new(values);
        }
        Self::new(values.into_iter().map(|v| (v as f64 / norm) as f32).collect())
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f32 {
        self.norm
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Cosine similarity clamped to `[-1, 1]`; zero when either side is zero.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    if a.dimension() != b.dimension() {
        return Err(EmbedError::DimensionMismatch {
            expected: a.dimension(),
            got: b.dimension(),
        });
    }
    Ok(cosine_with_norms(a.values(), a.norm() as f64, b.values(), b.norm() as f64))
}

pub(crate) fn cosine_with_norms(a: &[f32], na: f64, b: &[f32], nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// A source of raw vectors. Implementations must be deterministic per text
/// (remote providers rely on the cache for that).
pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn dimension(&self) -> usize;
    fn kind(&self) -> ProviderKind;
    /// Embeds non-empty texts, one vector per input, in order.
    fn embed_raw(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbedError>;
    /// Inputs longer than this (in characters) are truncated before embedding.
    fn max_input_chars(&self) -> Option<usize> {
        None
    }
}

/// Cache-first batch front-end over an [`EmbeddingProvider`].
#[derive(Clone)]
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    cache: Option<Arc<EmbeddingCache>>,
}

impl std::fmt::Debug for Embedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Embedder")
            .field("provider", &self.provider.provider_id())
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

impl Embedder {
    pub fn new(provider: Arc<dyn EmbeddingProvider>) -> Self {
        Self {
            provider,
            cache: None,
        }
    }

    pub fn local() -> Self {
        Self::new(Arc::new(LocalHashEmbedder::new()))
    }

    pub fn with_cache(mut self, cache: Arc<EmbeddingCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn provider_id(&self) -> &str {
        self.provider.provider_id()
    }

    pub fn dimension(&self) -> usize {
        self.provider.dimension()
    }

    pub fn kind(&self) -> ProviderKind {
        self.provider.kind()
    }

    pub fn embed_one(&self, text: &str) -> Result<Embedding, EmbedError> {
        Ok(self.embed_batch(&[text])?.pop().expect("one input, one output"))
    }

    pub fn embed_batch<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Embedding>, EmbedError> {
        if let Some(index) = texts.iter().position(|t| t.as_ref().is_empty()) {
            return Err(EmbedError::EmptyText { index });
        }
        let cap = self.provider.max_input_chars();
        let inputs: Vec<&str> = texts
            .iter()
            .map(|t| truncate_chars(t.as_ref(), cap, self.provider.provider_id()))
            .collect();
        let provider_id = self.provider.provider_id();
        let dim = self.provider.dimension();

        let mut out: Vec<Option<Vec<f32>>> = match &self.cache {
            Some(cache) => inputs.iter().map(|t| cache.get(provider_id, t)).collect(),
            None => vec![None; inputs.len()],
        };
        let misses: Vec<usize> = (0..inputs.len()).filter(|&i| out[i].is_none()).collect();
        if !misses.is_empty() {
            let miss_texts: Vec<&str> = misses.iter().map(|&i| inputs[i]).collect();
            let vectors = self.provider.embed_raw(&miss_texts)?;
            for (&i, v) in misses.iter().zip(vectors) {
                if v.len() != dim {
                    return Err(EmbedError::DimensionMismatch {
                        expected: dim,
                        got: v.len(),
                    });
                }
                let v = match self.provider.kind() {
                    ProviderKind::Remote => Embedding::normalized(v).into_values(),
                    ProviderKind::Local => v,
                };
                if let Some(cache) = &self.cache {
                    cache.put(provider_id, inputs[i], &v)?;
                }
                out[i] = Some(v);
            }
        }
        Ok(out
            .into_iter()
            .map(|v| Embedding::new(v.expect("every slot filled")))
            .collect())
    }
}

fn truncate_chars<'a>(text: &'a str, cap: Option<usize>, provider: &str) -> &'a str {
    let Some(cap) = cap else { return text };
    match text.char_indices().nth(cap) {
        Some((byte, _)) => {
            tracing::warn!(provider, cap, "embedding input truncated");
            &text[..byte]
        }
        None => text,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec())
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine(&e(&[0.3, 0.4]), &e(&[0.3, 0.4])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(cosine(&e(&[1.0, 0.0]), &e(&[-1.0, 0.0])).unwrap(), -1.0);
        assert_eq!(cosine(&e(&[0.0, 0.0]), &e(&[1.0, 0.0])).unwrap(), 0.0);
        assert!(matches!(
            cosine(&e(&[1.0]), &e(&[1.0, 0.0])),
            Err(EmbedError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn empty_text_rejected_with_index() {
        let emb = Embedder::local();
        match emb.embed_batch(&["ok", ""]) {
            Err(EmbedError::EmptyText { index }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identical_inputs_identical_vectors() {
        let emb = Embedder::local();
        let v = emb.embed_batch(&["abc", "abc"]).unwrap();
        assert_eq!(v[0], v[1]);
        assert!((cosine(&v[0], &v[1]).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn truncation_respects_char_boundaries() {
        assert_eq!(truncate_chars("héllo", Some(2), "x"), "hé");
        assert_eq!(truncate_chars("hi", Some(8000), "x"), "hi");
    }

    proptest::proptest! {
        #[test]
        fn cosine_is_symmetric(a in proptest::collection::vec(-10.0f32..10.0, 8),
                               b in proptest::collection::vec(-10.0f32..10.0, 8)) {
            let (a, b) = (e(&a), e(&b));
            proptest::prop_assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
        }
    }
}
