//! Pipeline execution with recorded traces, single-step recomputation and
//! replay from any step.
//!
//! A run walks the pipeline in order, expanding Foreach bodies once per list
//! item, and records one [`TraceStep`] per executed primitive. Resuming at
//! step `i` replays steps before `i` from the recorded trace (after checking
//! that their resolved parameters still match), runs step `i` with the
//! override and executes everything after it fresh. Pipelines must be
//! deterministic functions of their step outputs for replay to be sound.

mod exec;
mod pipeline;
mod session;
pub mod template;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::EmbedError;
use crate::index::{IndexError, RetrievalMethod, RetrievalWarning, ScoredChunk};
use crate::llm::{JsonListError, LlmError, LlmResponse};

pub use exec::Engine;
pub use pipeline::{
    ManualChunk, ParseSpec, PipelineDef, RetrieverDefaults, RetrieverPatch, StepDef, StepKind,
    BASELINE_ANSWER_PROMPT,
};
pub use session::{Observer, Session, SessionSnapshot};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid pipeline: {0}")]
    InvalidPipeline(String),
    #[error("step `{step}` references unknown `{{{placeholder}}}`")]
    Template { step: String, placeholder: String },
    #[error("query text is empty")]
    EmptyQuery,
    #[error("step {index} (`{step}`) failed: {cause}")]
    StepFailure {
        index: usize,
        step: String,
        cause: Box<EngineError>,
    },
    #[error("override does not apply to step {index}: {reason}")]
    IncompatibleOverride { index: usize, reason: String },
    #[error("no step {index}; the trace has {len} steps")]
    StepNotFound { index: usize, len: usize },
    #[error("step {index} is not a retrieve step")]
    NotRetriever { index: usize },
    #[error("nothing has run yet")]
    NoTrace,
    #[error("replay diverged at step {index}: {reason}; run the pipeline again")]
    ReplayDivergence { index: usize, reason: String },
    #[error("a run is already in progress")]
    Busy,
    #[error("unknown chunk id `{0}`")]
    UnknownChunk(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("llm output: {0}")]
    Parse(#[from] JsonListError),
}

impl EngineError {
    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        match self {
            Self::InvalidPipeline(_) => "InvalidPipeline",
            Self::Template { .. } => "TemplateError",
            Self::EmptyQuery => "EmptyQuery",
            Self::StepFailure { .. } => "StepFailure",
            Self::IncompatibleOverride { .. } => "IncompatibleOverride",
            Self::StepNotFound { .. } => "StepNotFound",
            Self::NotRetriever { .. } => "NotRetriever",
            Self::NoTrace => "NoTrace",
            Self::ReplayDivergence { .. } => "ReplayDivergence",
            Self::Busy => "Busy",
            Self::UnknownChunk(_) => "UnknownChunk",
            Self::Index(IndexError::IndexMissing(_)) => "IndexMissing",
            Self::Index(e) if e.is_provider_unavailable() => "ProviderUnavailable",
            Self::Index(_) => "IndexError",
            Self::Llm(LlmError::ProviderUnavailable { .. }) => "ProviderUnavailable",
            Self::Llm(LlmError::PromptTooLarge { .. }) => "PromptTooLarge",
            Self::Llm(_) => "LlmError",
            Self::Embed(EmbedError::ProviderUnavailable { .. }) => "ProviderUnavailable",
            Self::Embed(EmbedError::EmptyText { .. }) => "EmptyText",
            Self::Embed(_) => "EmbedError",
            Self::Parse(_) => "ParseError",
        }
    }

    /// Step index the error is about, if any.
    pub fn step_index(&self) -> Option<usize> {
        match self {
            Self::StepFailure { index, .. }
            | Self::IncompatibleOverride { index, .. }
            | Self::StepNotFound { index, .. }
            | Self::NotRetriever { index }
            | Self::ReplayDivergence { index, .. } => Some(*index),
            _ => None,
        }
    }

    /// The innermost cause of a step failure.
    pub fn root_cause(&self) -> &EngineError {
        match self {
            Self::StepFailure { cause, .. } => cause.root_cause(),
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Recorded,
    Replayed,
    Overridden,
}

/// Fully concrete inputs of one executed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResolvedParams {
    Query {
        text: String,
    },
    Retrieve {
        query: String,
        k: usize,
        chunk_size: usize,
        chunk_overlap: usize,
        method: RetrievalMethod,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mmr_lambda: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        manual: Option<Vec<ManualChunk>>,
    },
    Llm {
        prompt: String,
        max_tokens: u32,
        temperature: f64,
        model: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        json_list_key: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        output: Option<String>,
    },
    Answer {
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        output: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StepOutput {
    QueryText {
        text: String,
    },
    Chunks {
        chunks: Vec<ScoredChunk>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        warnings: Vec<RetrievalWarning>,
    },
    /// LLM text, or the user's replacement when `edited`. `parsed` holds the
    /// JSON list when the step declares one.
    Generation {
        text: String,
        edited: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        response: Option<LlmResponse>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        parsed: Option<Vec<String>>,
    },
    FinalAnswer {
        text: String,
        edited: bool,
    },
}

impl StepOutput {
    /// Text substituted for `{step}` in templates. Chunks render the selected
    /// ones as `[(i)] text` blocks separated by blank lines.
    pub fn render(&self) -> String {
        match self {
            Self::QueryText { text } | Self::FinalAnswer { text, .. } => text.clone(),
            Self::Generation { text, .. } => text.clone(),
            Self::Chunks { chunks, .. } => chunks
                .iter()
                .filter(|c| c.selected)
                .enumerate()
                .map(|(i, c)| format!("[({})] {}", i + 1, c.chunk.text))
                .collect::<Vec<_>>()
                .join("\n\n"),
        }
    }

    pub fn selected_chunk_ids(&self) -> Vec<&str> {
        match self {
            Self::Chunks { chunks, .. } => chunks
                .iter()
                .filter(|c| c.selected)
                .map(|c| c.chunk.chunk_id.as_str())
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// A what-if change applied to one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum OverridePayload {
    RetrieverParams(RetrieverPatch),
    ManualChunks {
        chunks: Vec<ManualChunk>,
    },
    PromptText {
        text: String,
    },
    LlmParams {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_tokens: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        temperature: Option<f64>,
    },
    EditedOutput {
        text: String,
    },
    QueryText {
        text: String,
    },
}

impl OverridePayload {
    pub fn name(&self) -> &'static str {
        match self {
            Self::RetrieverParams(_) => "retriever_params",
            Self::ManualChunks { .. } => "manual_chunks",
            Self::PromptText { .. } => "prompt_text",
            Self::LlmParams { .. } => "llm_params",
            Self::EditedOutput { .. } => "edited_output",
            Self::QueryText { .. } => "query_text",
        }
    }

    fn applies_to(&self, kind: StepKind) -> bool {
        matches!(
            (self, kind),
            (Self::QueryText { .. }, StepKind::Query)
                | (Self::RetrieverParams(_) | Self::ManualChunks { .. }, StepKind::Retrieve)
                | (Self::PromptText { .. } | Self::LlmParams { .. }, StepKind::Llm)
                | (Self::EditedOutput { .. }, StepKind::Llm | StepKind::Answer)
        )
    }
}

/// Every override in effect on a step, accumulated across what-if edits.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AppliedOverrides {
    #[serde(default, skip_serializing_if = "RetrieverPatch::is_empty")]
    pub retriever: RetrieverPatch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manual: Option<Vec<ManualChunk>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_text: Option<String>,
}

impl AppliedOverrides {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    /// Folds `payload` in. New retriever parameters drop a manual
    /// selection; new prompt or sampling parameters drop an edited output.
    pub(crate) fn apply(
        &mut self,
        index: usize,
        kind: StepKind,
        payload: &OverridePayload,
    ) -> Result<(), EngineError> {
        let incompatible = |reason: String| EngineError::IncompatibleOverride { index, reason };
        if !payload.applies_to(kind) {
            return Err(incompatible(format!("{} cannot change a {kind} step", payload.name())));
        }
        match payload {
            OverridePayload::RetrieverParams(params) => {
                if params.k == Some(0) {
                    return Err(incompatible("k must be positive".into()));
                }
                if params.mmr_lambda.is_some_and(|l| !(0.0..=1.0).contains(&l)) {
                    return Err(incompatible("mmr_lambda must be within [0, 1]".into()));
                }
                self.retriever = self.retriever.merged(*params);
                self.manual = None;
            }
            OverridePayload::ManualChunks { chunks } => self.manual = Some(chunks.clone()),
            OverridePayload::PromptText { text } => {
                if text.trim().is_empty() {
                    return Err(incompatible("prompt is empty".into()));
                }
                self.prompt = Some(text.clone());
                self.edited_output = None;
            }
            OverridePayload::LlmParams {
                max_tokens,
                temperature,
            } => {
                if *max_tokens == Some(0) || temperature.is_some_and(|t| !(t >= 0.0)) {
                    return Err(incompatible(
                        "max_tokens must be positive and temperature >= 0".into(),
                    ));
                }
                self.max_tokens = max_tokens.or(self.max_tokens);
                self.temperature = temperature.or(self.temperature);
                self.edited_output = None;
            }
            OverridePayload::EditedOutput { text } => self.edited_output = Some(text.clone()),
            OverridePayload::QueryText { text } => {
                if text.trim().is_empty() {
                    return Err(EngineError::EmptyQuery);
                }
                self.query_text = Some(text.clone());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub index: usize,
    pub step_name: String,
    pub kind: StepKind,
    /// Position within the enclosing Foreach, for expanded body steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
    pub resolved_params: ResolvedParams,
    pub input_digest: String,
    pub output: StepOutput,
    pub duration_ms: u64,
    pub origin: Origin,
    /// Upstream changed since this step ran.
    #[serde(default)]
    pub stale: bool,
    #[serde(default, skip_serializing_if = "AppliedOverrides::is_empty")]
    pub overrides: AppliedOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFailure {
    pub index: usize,
    pub step_name: String,
    pub code: String,
    pub message: String,
}

/// One execution of a pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub trace_id: String,
    pub generation: u64,
    /// The trace this one was derived from by run_step or run_all.
    pub lineage: Option<String>,
    pub pipeline_digest: String,
    pub query: String,
    pub steps: Vec<TraceStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<TraceFailure>,
}

impl Trace {
    pub fn final_answer(&self) -> Option<&str> {
        self.steps.iter().rev().find_map(|s| match &s.output {
            StepOutput::FinalAnswer { text, .. } => Some(text.as_str()),
            _ => None,
        })
    }

    /// sha256 of the trace content with timing fields, origins and trace
    /// identity removed. Equal digests mean the runs produced the same steps.
    pub fn content_digest(&self) -> String {
        let steps: Vec<TraceStep> = self
            .steps
            .iter()
            .cloned()
            .map(|mut s| {
                s.duration_ms = 0;
                s.origin = Origin::Recorded;
                if let StepOutput::Generation {
                    response: Some(r), ..
                } = &mut s.output
                {
                    r.latency_ms = 0;
                }
                s
            })
            .collect();
        let body = serde_json::to_vec(&(&self.query, &steps, &self.failure))
            .expect("trace serializes");
        crate::fsutil::sha256_hex(&body)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    RunPipeline,
    RunStep,
    RunAll,
}

/// Lifecycle notifications, in order, for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    RunStarted {
        generation: u64,
        mode: RunMode,
    },
    StepFinished {
        generation: u64,
        index: usize,
        step_name: String,
        origin: Origin,
    },
    RunFinished {
        generation: u64,
        steps: usize,
    },
    RunFailed {
        generation: u64,
        index: Option<usize>,
        code: String,
        message: String,
    },
}
