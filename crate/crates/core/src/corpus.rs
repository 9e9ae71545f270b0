//! Document loading and sliding-window chunking.
//!
//! All offsets in this module are character offsets (Unicode scalar values),
//! not byte offsets.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

/// Patterns used when the caller passes an empty include list.
pub const DEFAULT_INCLUDE_GLOBS: &[&str] = &["**/*.txt", "**/*.md"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no documents matched under {root}")]
    NoDocuments { root: PathBuf },
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid include pattern `{pattern}`: {message}")]
    BadPattern { pattern: String, message: String },
    #[error("invalid chunk config: overlap {overlap} must be smaller than size {size}")]
    InvalidChunkConfig { size: usize, overlap: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    /// Length of `text` in characters.
    pub byte_len: usize,
    pub metadata: BTreeMap<String, String>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        let doc_id = doc_id.into();
        let text = normalize_text(&text.into());
        let mut metadata = BTreeMap::new();
        let filename = doc_id.rsplit('/').next().unwrap_or(&doc_id).to_string();
        metadata.insert("filename".to_string(), filename);
        if let Some(title) = markdown_title(&text) {
            metadata.insert("title".to_string(), title);
        }
        Self {
            byte_len: text.chars().count(),
            doc_id,
            text,
            metadata,
        }
    }
}

fn markdown_title(text: &str) -> Option<String> {
    text.lines()
        .find(|l| !l.trim().is_empty())
        .and_then(|l| l.trim().strip_prefix("# "))
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
}

/// Line endings become `\n`; everything else is kept verbatim.
pub fn normalize_text(text: &str) -> String {
    text.replace("\r\n", "\n").replace('\r', "\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    documents: Vec<Document>,
    digest: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    warnings: Vec<String>,
}

impl Corpus {
    /// Builds a corpus from in-memory documents. Empty documents are dropped
    /// and reported in [`Corpus::warnings`]; duplicate ids keep the first.
    pub fn from_documents(docs: impl IntoIterator<Item = Document>) -> Self {
        let mut warnings = Vec::new();
        let mut by_id: BTreeMap<String, Document> = BTreeMap::new();
        for doc in docs {
            if doc.text.is_empty() {
                tracing::warn!(doc_id = %doc.doc_id, "dropping empty document");
                warnings.push(format!("dropped empty document {}", doc.doc_id));
                continue;
            }
            if by_id.contains_key(&doc.doc_id) {
                warnings.push(format!("duplicate document id {}", doc.doc_id));
                continue;
            }
            by_id.insert(doc.doc_id.clone(), doc);
        }
        let documents: Vec<Document> = by_id.into_values().collect();
        let digest = corpus_digest(&documents);
        Self {
            documents,
            digest,
            warnings,
        }
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    /// Hex SHA-256 over `(doc_id, text)` pairs in document order.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

fn corpus_digest(documents: &[Document]) -> String {
    let mut hasher = Sha256::new();
    for doc in documents {
        // Length prefixes keep ("ab","c") and ("a","bc") distinct.
        hasher.update((doc.doc_id.len() as u64).to_le_bytes());
        hasher.update(doc.doc_id.as_bytes());
        hasher.update((doc.text.len() as u64).to_le_bytes());
        hasher.update(doc.text.as_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Loads every file under `root_dir` whose path relative to the root matches
/// one of `include_globs` (defaults to `.txt` and `.md` files when empty).
pub fn load_corpus(root_dir: &Path, include_globs: &[String]) -> Result<Corpus, CorpusError> {
    let patterns = compile_globs(include_globs)?;
    let meta = fs::metadata(root_dir).map_err(|source| CorpusError::Io {
        path: root_dir.to_path_buf(),
        source,
    })?;
    if !meta.is_dir() {
        return Err(CorpusError::Io {
            path: root_dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotADirectory, "not a directory"),
        });
    }

    let opts = glob::MatchOptions {
        case_sensitive: true,
        require_literal_separator: false,
        require_literal_leading_dot: false,
    };
    let mut docs = Vec::new();
    for entry in WalkDir::new(root_dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CorpusError::Io {
            path: e.path().map(Path::to_path_buf).unwrap_or_else(|| root_dir.to_path_buf()),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(root_dir)
            .expect("walkdir yields paths under its root");
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if rel.starts_with(".ragforge/") {
            continue;
        }
        if !patterns.iter().any(|p| p.matches_with(&rel, opts)) {
            continue;
        }
        let bytes = fs::read(entry.path()).map_err(|source| CorpusError::Io {
            path: entry.path().to_path_buf(),
            source,
        })?;
        docs.push(Document::new(rel, String::from_utf8_lossy(&bytes).into_owned()));
    }

    if docs.is_empty() {
        return Err(CorpusError::NoDocuments {
            root: root_dir.to_path_buf(),
        });
    }
    let corpus = Corpus::from_documents(docs);
    if corpus.is_empty() {
        return Err(CorpusError::NoDocuments {
            root: root_dir.to_path_buf(),
        });
    }
    Ok(corpus)
}

fn compile_globs(include_globs: &[String]) -> Result<Vec<glob::Pattern>, CorpusError> {
    let raw: Vec<&str> = if include_globs.is_empty() {
        DEFAULT_INCLUDE_GLOBS.to_vec()
    } else {
        include_globs.iter().map(String::as_str).collect()
    };
    raw.into_iter()
        .map(|p| {
            glob::Pattern::new(p).map_err(|e| CorpusError::BadPattern {
                pattern: p.to_string(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// A `(chunk_size, chunk_overlap)` pair. Construction enforces
/// `0 <= overlap < size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawChunkConfig")]
pub struct ChunkConfig {
    chunk_size: usize,
    chunk_overlap: usize,
}

#[derive(Deserialize)]
struct RawChunkConfig {
    chunk_size: usize,
    chunk_overlap: usize,
}

impl TryFrom<RawChunkConfig> for ChunkConfig {
    type Error = CorpusError;

    fn try_from(raw: RawChunkConfig) -> Result<Self, Self::Error> {
        ChunkConfig::new(raw.chunk_size, raw.chunk_overlap)
    }
}

impl ChunkConfig {
    pub fn new(chunk_size: usize, chunk_overlap: usize) -> Result<Self, CorpusError> {
        if chunk_size == 0 || chunk_overlap >= chunk_size {
            return Err(CorpusError::InvalidChunkConfig {
                size: chunk_size,
                overlap: chunk_overlap,
            });
        }
        Ok(Self {
            chunk_size,
            chunk_overlap,
        })
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn chunk_overlap(&self) -> usize {
        self.chunk_overlap
    }

    pub fn stride(&self) -> usize {
        self.chunk_size - self.chunk_overlap
    }
}

impl fmt::Display for ChunkConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.chunk_size, self.chunk_overlap)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub text: String,
}

impl Chunk {
    pub fn make_id(doc_id: &str, start: usize, end: usize) -> String {
        format!("{doc_id}#{start}..{end}")
    }

    pub fn char_len(&self) -> usize {
        self.end - self.start
    }
}

/// Slides a `chunk_size` window with stride `chunk_size - chunk_overlap`
/// from offset 0. The last window is cut at the document end, and no window
/// is emitted once one has reached the end (any later window would lie
/// entirely inside it).
pub fn chunk_document(doc: &Document, cfg: ChunkConfig) -> Vec<Chunk> {
    // Byte offset of every char boundary, plus the end.
    let bounds: Vec<usize> = doc
        .text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(doc.text.len()))
        .collect();
    let n = bounds.len() - 1;
    let mut chunks = Vec::with_capacity(n / cfg.stride() + 1);
    let mut start = 0;
    while start < n {
        let end = (start + cfg.chunk_size).min(n);
        chunks.push(Chunk {
            chunk_id: Chunk::make_id(&doc.doc_id, start, end),
            doc_id: doc.doc_id.clone(),
            start,
            end,
            text: doc.text[bounds[start]..bounds[end]].to_string(),
        });
        if end == n {
            break;
        }
        start += cfg.stride();
    }
    chunks
}

/// Chunks never cross document boundaries.
pub fn chunk_corpus(corpus: &Corpus, cfg: ChunkConfig) -> Vec<Chunk> {
    corpus
        .documents()
        .iter()
        .flat_map(|d| chunk_document(d, cfg))
        .collect()
}
