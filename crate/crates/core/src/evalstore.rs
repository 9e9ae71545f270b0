//! Golden answers per query and scoring of new runs against them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::{cosine, EmbedError, Embedder};
use crate::engine::{Engine, EngineError, PipelineDef, Session};
use crate::fsutil::{sha256_hex, write_atomic};

pub const DEFAULT_THRESHOLD: f64 = 0.85;
pub const GOLDENS_FILE: &str = "goldens.json";
pub const HISTORY_FILE: &str = "goldens_history.jsonl";
const LOCK_FILE: &str = "goldens.lock";
const EXCERPT_CHARS: usize = 160;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("golden store I/O at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("golden store at {path} is corrupt: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("{0} is empty")]
    EmptyText(&'static str),
    #[error("no golden answers saved")]
    NoGoldens,
    #[error("no golden answer for query {0:?}")]
    UnknownQuery(String),
    #[error("threshold {0} is outside [-1, 1]")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Io { .. } | Self::Corrupt { .. } => "IoError",
            Self::EmptyText(_) | Self::Embed(EmbedError::EmptyText { .. }) => "EmptyText",
            Self::NoGoldens => "NoGoldens",
            Self::UnknownQuery(_) => "UnknownQuery",
            Self::InvalidThreshold(_) => "InvalidThreshold",
            Self::Embed(EmbedError::ProviderUnavailable { .. }) => "ProviderUnavailable",
            Self::Embed(_) => "EmbedError",
        }
    }
}

/// Trims and collapses internal whitespace runs to one space.
pub fn normalize_query(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// First 32 hex chars of sha256 over the normalized query.
pub fn query_id(text: &str) -> String {
    let mut id = sha256_hex(normalize_query(text).as_bytes());
    id.truncate(32);
    id
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenAnswer {
    pub query_id: String,
    pub query_text: String,
    pub answer_text: String,
    /// Unix milliseconds.
    pub saved_at: u64,
    pub pipeline_digest: String,
    pub edited: bool,
}

/// A golden that was overwritten, with the time it was replaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub archived_at: u64,
    pub golden: GoldenAnswer,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct GoldenFile {
    goldens: Vec<GoldenAnswer>,
}

/// `goldens.json` plus an append-only history, guarded by an advisory file
/// lock so that only one writer touches them at a time.
#[derive(Debug, Clone)]
pub struct GoldenStore {
    dir: PathBuf,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl GoldenStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, EvalError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| EvalError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn io(&self, name: &str) -> impl Fn(std::io::Error) -> EvalError + '_ {
        let path = self.dir.join(name);
        move |source| EvalError::Io {
            path: path.clone(),
            source,
        }
    }

    fn lock(&self, exclusive: bool) -> Result<fs::File, EvalError> {
        let f = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.dir.join(LOCK_FILE))
            .map_err(self.io(LOCK_FILE))?;
        if exclusive {
            f.lock().map_err(self.io(LOCK_FILE))?;
        } else {
            f.lock_shared().map_err(self.io(LOCK_FILE))?;
        }
        Ok(f)
    }

    fn read_unlocked(&self) -> Result<Vec<GoldenAnswer>, EvalError> {
        let path = self.dir.join(GOLDENS_FILE);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice::<GoldenFile>(&bytes)
                .map(|f| f.goldens)
                .map_err(|e| EvalError::Corrupt {
                    path,
                    message: e.to_string(),
                }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(source) => Err(EvalError::Io { path, source }),
        }
    }

    /// Every active golden, ordered by query_id.
    pub fn load(&self) -> Result<Vec<GoldenAnswer>, EvalError> {
        let _lock = self.lock(false)?;
        self.read_unlocked()
    }

    pub fn get(&self, query_text: &str) -> Result<Option<GoldenAnswer>, EvalError> {
        let id = query_id(query_text);
        Ok(self.load()?.into_iter().find(|g| g.query_id == id))
    }

    pub fn history(&self) -> Result<Vec<HistoryEntry>, EvalError> {
        let _lock = self.lock(false)?;
        let path = self.dir.join(HISTORY_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(source) => return Err(EvalError::Io { path, source }),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| EvalError::Corrupt {
                    path: path.clone(),
                    message: e.to_string(),
                })
            })
            .collect()
    }

    /// Saves `answer_text` as the golden for `query_text`. A previous golden
    /// for the same query is appended to the history first.
    pub fn save_answer(
        &self,
        query_text: &str,
        answer_text: &str,
        pipeline_digest: &str,
        edited: bool,
    ) -> Result<GoldenAnswer, EvalError> {
        if query_text.trim().is_empty() {
            return Err(EvalError::EmptyText("query text"));
        }
        if answer_text.trim().is_empty() {
            return Err(EvalError::EmptyText("answer text"));
        }
        let _lock = self.lock(true)?;
        let mut goldens = self.read_unlocked()?;
        let now = now_ms();
        let golden = GoldenAnswer {
            query_id: query_id(query_text),
            query_text: normalize_query(query_text),
            answer_text: answer_text.to_string(),
            saved_at: now,
            pipeline_digest: pipeline_digest.to_string(),
            edited,
        };
        match goldens.binary_search_by(|g| g.query_id.cmp(&golden.query_id)) {
            Ok(i) => {
                let old = std::mem::replace(&mut goldens[i], golden.clone());
                let mut line = serde_json::to_string(&HistoryEntry {
                    archived_at: now,
                    golden: old,
                })
                .expect("golden serializes");
                line.push('\n');
                let mut f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(self.dir.join(HISTORY_FILE))
                    .map_err(self.io(HISTORY_FILE))?;
                f.write_all(line.as_bytes()).map_err(self.io(HISTORY_FILE))?;
                f.sync_all().map_err(self.io(HISTORY_FILE))?;
            }
            Err(i) => goldens.insert(i, golden.clone()),
        }
        let body = serde_json::to_vec_pretty(&GoldenFile { goldens }).expect("goldens serialize");
        write_atomic(&self.dir.join(GOLDENS_FILE), &body).map_err(self.io(GOLDENS_FILE))?;
        Ok(golden)
    }
}

/// Cosine between the embeddings of two answers.
pub fn similarity(a: &str, b: &str, embedder: &Embedder) -> Result<f64, EvalError> {
    if a.trim().is_empty() || b.trim().is_empty() {
        return Err(EvalError::EmptyText("answer text"));
    }
    let v = embedder.embed_batch(&[a, b])?;
    Ok(cosine(&v[0], &v[1])?)
}

pub fn check_similarity(
    current_answer: &str,
    golden: &GoldenAnswer,
    embedder: &Embedder,
) -> Result<f64, EvalError> {
    similarity(current_answer, &golden.answer_text, embedder)
}

/// Two decimals, the way scores are shown to users.
pub fn display_similarity(value: f64) -> String {
    format!("{value:.2}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub query_id: String,
    pub query_text: String,
    pub similarity: Option<f64>,
    pub pass: bool,
    pub answer_excerpt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RowError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub threshold: f64,
    pub rows: Vec<SuiteRow>,
    pub pass_count: usize,
    /// Mean over rows that produced a similarity.
    pub mean_similarity: Option<f64>,
}

impl SuiteReport {
    pub fn all_pass(&self) -> bool {
        self.pass_count == self.rows.len()
    }
}

fn excerpt(text: &str) -> String {
    match text.char_indices().nth(EXCERPT_CHARS) {
        Some((b, _)) => format!("{}...", &text[..b]),
        None => text.to_string(),
    }
}

/// Runs `pipeline` fresh on every golden query and scores the final answers.
/// A failing row is recorded with its error and the suite continues.
pub fn run_suite(
    engine: &Arc<Engine>,
    pipeline: &PipelineDef,
    goldens: &[GoldenAnswer],
    embedder: &Embedder,
    threshold: f64,
) -> Result<SuiteReport, EvalError> {
    if goldens.is_empty() {
        return Err(EvalError::NoGoldens);
    }
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(EvalError::InvalidThreshold(threshold));
    }
    let rows: Vec<SuiteRow> = goldens
        .par_iter()
        .map(|g| score_row(engine, pipeline, g, embedder, threshold))
        .collect();
    let pass_count = rows.iter().filter(|r| r.pass).count();
    let sims: Vec<f64> = rows.iter().filter_map(|r| r.similarity).collect();
    let mean_similarity = (!sims.is_empty()).then(|| sims.iter().sum::<f64>() / sims.len() as f64);
    Ok(SuiteReport {
        threshold,
        rows,
        pass_count,
        mean_similarity,
    })
}

fn score_row(
    engine: &Arc<Engine>,
    pipeline: &PipelineDef,
    golden: &GoldenAnswer,
    embedder: &Embedder,
    threshold: f64,
) -> SuiteRow {
    let mut row = SuiteRow {
        query_id: golden.query_id.clone(),
        query_text: golden.query_text.clone(),
        similarity: None,
        pass: false,
        answer_excerpt: String::new(),
        error: None,
    };
    let answer = Session::new(engine.clone(), pipeline.clone())
        .and_then(|s| s.run_pipeline(&golden.query_text))
        .and_then(|t| {
            t.final_answer()
                .map(str::to_string)
                .ok_or(EngineError::InvalidPipeline("run produced no answer".into()))
        });
    let answer = match answer {
        Ok(a) => a,
        Err(e) => {
            row.error = Some(RowError {
                code: e.root_cause().code().to_string(),
                message: e.to_string(),
                step_index: e.step_index(),
            });
            return row;
        }
    };
    row.answer_excerpt = excerpt(&answer);
    match check_similarity(&answer, golden, embedder) {
        Ok(s) => {
            row.similarity = Some(s);
            row.pass = s >= threshold;
        }
        Err(e) => {
            row.error = Some(RowError {
                code: e.code().to_string(),
                message: e.to_string(),
                step_index: None,
            })
        }
    }
    row
}
