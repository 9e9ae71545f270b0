//! Pre-materialized retrieval indexes over a grid of chunk configurations.
//!
//! Every `(chunk_size, chunk_overlap, method)` combination for a corpus is
//! built once by [`IndexStore::build_all`]; afterwards changing any retriever
//! parameter is a lookup plus a scan of an in-memory index.

mod grid;
mod kmeans;
mod mmr;
mod raptor;
mod store;
mod tfidf;
mod vector;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Chunk, ChunkConfig};
use crate::embedder::EmbedError;
use crate::llm::LlmError;

pub use grid::{default_grid, grid_of, DEFAULT_CHUNK_OVERLAPS, DEFAULT_CHUNK_SIZES};
pub use kmeans::balanced_kmeans;
pub use mmr::{mmr_select, DEFAULT_MMR_LAMBDA};
pub use raptor::{
    build_raptor, LlmSummarizer, PrefixSummarizer, RaptorNode, RaptorParams, RaptorTree,
    Summarizer, RAPTOR_ID_PREFIX, RAPTOR_PROMPT_TEMPLATE,
};
pub use store::{BuildReport, IndexStore, ManifestEntry, StoreManifest};
pub use tfidf::{tokenize, TfIdfIndex};
pub use vector::VectorIndex;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("index missing for {0}; run `ragforge index build`")]
    IndexMissing(IndexKey),
    #[error("query is empty")]
    EmptyQuery,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("mmr lambda {0} outside [0, 1]")]
    InvalidLambda(f64),
    #[error("index {key} was built with embedder {built_with}, current embedder is {current}")]
    ProviderMismatch {
        key: IndexKey,
        built_with: String,
        current: String,
    },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("index store I/O at {path}: {message}")]
    Io { path: std::path::PathBuf, message: String },
    #[error("corrupt index at {path}: {message}")]
    Corrupt { path: std::path::PathBuf, message: String },
}

impl IndexError {
    pub(crate) fn io(path: &std::path::Path, err: impl fmt::Display) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }

    pub(crate) fn corrupt(path: &std::path::Path, err: impl fmt::Display) -> Self {
        Self::Corrupt {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }

    /// True when the failure came from an embedding or LLM provider.
    pub fn is_provider_unavailable(&self) -> bool {
        matches!(
            self,
            Self::Embed(EmbedError::ProviderUnavailable { .. })
                | Self::Llm(LlmError::ProviderUnavailable { .. })
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMethod {
    CosineSim,
    TfIdf,
    Mmr,
    Raptor,
}

impl RetrievalMethod {
    pub const ALL: [RetrievalMethod; 4] = [Self::CosineSim, Self::TfIdf, Self::Mmr, Self::Raptor];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::CosineSim => "cosine_sim",
            Self::TfIdf => "tf_idf",
            Self::Mmr => "mmr",
            Self::Raptor => "raptor",
        }
    }

    pub fn needs_embeddings(&self) -> bool {
        !matches!(self, Self::TfIdf)
    }
}

impl fmt::Display for RetrievalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RetrievalMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match norm.as_str() {
            "cosinesim" | "cosine" | "vanilla" | "semantic" => Ok(Self::CosineSim),
            "tfidf" => Ok(Self::TfIdf),
            "mmr" => Ok(Self::Mmr),
            "raptor" => Ok(Self::Raptor),
            _ => Err(format!(
                "unknown retrieval method `{s}` (expected cosine_sim, tf_idf, mmr or raptor)"
            )),
        }
    }
}

/// Identity of one materialized index. Ordered by digest, size, overlap,
/// then method.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct IndexKey {
    pub corpus_digest: String,
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    pub method: RetrievalMethod,
}

impl IndexKey {
    pub fn new(corpus_digest: impl Into<String>, cfg: ChunkConfig, method: RetrievalMethod) -> Self {
        Self {
            corpus_digest: corpus_digest.into(),
            chunk_size: cfg.chunk_size(),
            chunk_overlap: cfg.chunk_overlap(),
            method,
        }
    }

    pub fn chunk_config(&self) -> ChunkConfig {
        ChunkConfig::new(self.chunk_size, self.chunk_overlap)
            .expect("keys are only built from valid configs")
    }

    /// Relative directory of this index under the store root.
    pub fn rel_dir(&self) -> String {
        let short = &self.corpus_digest[..self.corpus_digest.len().min(16)];
        format!(
            "{short}/{}_{}_{}",
            self.chunk_size, self.chunk_overlap, self.method
        )
    }
}

impl fmt::Display for IndexKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let short = &self.corpus_digest[..self.corpus_digest.len().min(12)];
        write!(
            f,
            "{short}:{}/{}:{}",
            self.chunk_size, self.chunk_overlap, self.method
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk: Chunk,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RetrievalWarning {
    /// Fewer chunks exist than were requested.
    KClamped { requested: usize, available: usize },
    /// Every score was zero, so the order is the chunk_id fallback.
    DegenerateRanking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub key: IndexKey,
    pub chunks: Vec<ScoredChunk>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<RetrievalWarning>,
}

/// Score descending, then chunk_id ascending.
pub(crate) fn by_score_then_id(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Ranks by index into `chunks` without cloning the losers.
pub(crate) fn rank_indices(
    chunks: &[Chunk],
    scores: &[f64],
    limit: usize,
    selected: bool,
) -> Vec<ScoredChunk> {
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let cmp = |&a: &usize, &b: &usize| {
        by_score_then_id((&chunks[a].chunk_id, scores[a]), (&chunks[b].chunk_id, scores[b]))
    };
    if limit < order.len() {
        order.select_nth_unstable_by(limit, cmp);
        order.truncate(limit);
    }
    order.sort_by(cmp);
    order
        .into_iter()
        .enumerate()
        .map(|(i, idx)| ScoredChunk {
            chunk: chunks[idx].clone(),
            score: scores[idx],
            rank: i + 1,
            selected,
        })
        .collect()
}
