//! JSON shapes returned by the API.

use serde::Serialize;

use ragforge_core::engine::{
    AppliedOverrides, Origin, PipelineDef, ResolvedParams, StepKind, StepOutput, Trace,
    TraceFailure, TraceStep,
};
use ragforge_core::index::{RetrievalWarning, ScoredChunk};
use ragforge_core::llm::FinishReason;

pub const HISTOGRAM_BINS: usize = 20;
pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 1000;

#[derive(Debug, Clone, Serialize)]
pub struct GoldenView {
    pub query_id: String,
    pub similarity: f64,
    pub display: String,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CellOutput {
    Query {
        text: String,
    },
    Chunks {
        selected: Vec<ScoredChunk>,
        #[serde(skip_serializing_if = "Vec::is_empty")]
        warnings: Vec<RetrievalWarning>,
        chunks_url: String,
        histogram_url: String,
    },
    Generation {
        prompt: String,
        text: String,
        edited: bool,
        #[serde(skip_serializing_if = "Option::is_none")]
        parsed: Option<Vec<String>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        finish_reason: Option<FinishReason>,
    },
    Answer {
        text: String,
        edited: bool,
        #[serde(skip_serializing_if = "Option::is_none")]
        golden: Option<GoldenView>,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct CellView {
    pub index: usize,
    pub kind: StepKind,
    pub step_name: String,
    pub title: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
    pub resolved_params: ResolvedParams,
    pub output: CellOutput,
    pub stale: bool,
    pub origin: Origin,
    #[serde(skip_serializing_if = "AppliedOverrides::is_empty")]
    pub overrides: AppliedOverrides,
    pub duration_ms: u64,
}

fn kind_title(kind: StepKind) -> &'static str {
    match kind {
        StepKind::Query => "Query",
        StepKind::Retrieve => "Retriever",
        StepKind::Llm => "LLM",
        StepKind::Answer => "Answer",
        StepKind::Foreach => "Foreach",
    }
}

impl CellView {
    pub fn from_step(step: &TraceStep, golden: Option<GoldenView>) -> Self {
        let i = step.index;
        let output = match &step.output {
            StepOutput::QueryText { text } => CellOutput::Query { text: text.clone() },
            StepOutput::Chunks { chunks, warnings } => CellOutput::Chunks {
                selected: chunks.iter().filter(|c| c.selected).cloned().collect(),
                warnings: warnings.clone(),
                chunks_url: format!("/api/steps/{i}/chunks"),
                histogram_url: format!("/api/steps/{i}/histogram"),
            },
            StepOutput::Generation {
                text,
                edited,
                response,
                parsed,
            } => CellOutput::Generation {
                prompt: match &step.resolved_params {
                    ResolvedParams::Llm { prompt, .. } => prompt.clone(),
                    _ => String::new(),
                },
                text: text.clone(),
                edited: *edited,
                parsed: parsed.clone(),
                finish_reason: response.as_ref().map(|r| r.finish_reason),
            },
            StepOutput::FinalAnswer { text, edited } => CellOutput::Answer {
                text: text.clone(),
                edited: *edited,
                golden,
            },
        };
        let mut title = format!("{}: {}", kind_title(step.kind), step.step_name);
        if let Some(it) = step.iteration {
            title.push_str(&format!(" #{}", it + 1));
        }
        Self {
            index: i,
            kind: step.kind,
            step_name: step.step_name.clone(),
            title,
            iteration: step.iteration,
            resolved_params: step.resolved_params.clone(),
            output,
            stale: step.stale,
            origin: step.origin,
            overrides: step.overrides.clone(),
            duration_ms: step.duration_ms,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SnapshotView {
    pub session_id: String,
    pub pipeline: std::sync::Arc<PipelineDef>,
    pub pipeline_digest: String,
    /// Generation of the trace shown in `cells` (0 before the first run).
    pub generation_counter: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    pub cells: Vec<CellView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<TraceFailure>,
}

impl SnapshotView {
    pub fn new(
        session_id: String,
        pipeline: std::sync::Arc<PipelineDef>,
        pipeline_digest: String,
        trace: Option<&Trace>,
        golden: impl Fn(&Trace) -> Option<GoldenView>,
    ) -> Self {
        let Some(t) = trace else {
            return Self {
                session_id,
                pipeline,
                pipeline_digest,
                generation_counter: 0,
                trace_id: None,
                query: None,
                cells: Vec::new(),
                failure: None,
            };
        };
        let g = golden(t);
        Self {
            session_id,
            pipeline,
            pipeline_digest,
            generation_counter: t.generation,
            trace_id: Some(t.trace_id.clone()),
            query: Some(t.query.clone()),
            cells: t
                .steps
                .iter()
                .map(|s| {
                    let golden = (s.kind == StepKind::Answer).then(|| g.clone()).flatten();
                    CellView::from_step(s, golden)
                })
                .collect(),
            failure: t.failure.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramView {
    pub step_index: usize,
    /// `bins + 1` edges; two equal edges when every score is the same.
    pub bin_edges: Vec<f64>,
    pub counts_all: Vec<usize>,
    pub counts_selected: Vec<usize>,
}

/// Equal-width bins over `[min, max]` of the observed scores. A score on
/// the top edge falls in the last bin.
pub fn histogram(step_index: usize, chunks: &[ScoredChunk]) -> HistogramView {
    let empty = HistogramView {
        step_index,
        bin_edges: Vec::new(),
        counts_all: Vec::new(),
        counts_selected: Vec::new(),
    };
    let Some(min) = chunks.iter().map(|c| c.score).reduce(f64::min) else {
        return empty;
    };
    let max = chunks.iter().map(|c| c.score).fold(min, f64::max);
    let bins = if max > min { HISTOGRAM_BINS } else { 1 };
    let width = (max - min) / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins)
        .map(|b| if b == bins { max } else { min + width * b as f64 })
        .collect();
    let mut counts_all = vec![0; bins];
    let mut counts_selected = vec![0; bins];
    for c in chunks {
        let b = if width > 0.0 {
            (((c.score - min) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts_all[b] += 1;
        if c.selected {
            counts_selected[b] += 1;
        }
    }
    HistogramView {
        step_index,
        bin_edges,
        counts_all,
        counts_selected,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ChunkPage {
    pub step_index: usize,
    /// Chunks matching the search, before paging.
    pub total: usize,
    /// 1-based.
    pub page: usize,
    pub page_size: usize,
    pub pages: usize,
    pub chunks: Vec<ScoredChunk>,
}

/// Case-insensitive substring filter, then the 1-based `page`.
pub fn page_chunks(
    step_index: usize,
    all: Vec<ScoredChunk>,
    search: Option<&str>,
    page: usize,
    page_size: usize,
) -> ChunkPage {
    let needle = search.map(str::to_lowercase).filter(|s| !s.is_empty());
    let matching: Vec<ScoredChunk> = match &needle {
        Some(n) => all
            .into_iter()
            .filter(|c| c.chunk.text.to_lowercase().contains(n.as_str()))
            .collect(),
        None => all,
    };
    let total = matching.len();
    let pages = total.div_ceil(page_size);
    let chunks = matching
        .into_iter()
        .skip((page - 1).saturating_mul(page_size))
        .take(page_size)
        .collect();
    ChunkPage {
        step_index,
        total,
        page,
        page_size,
        pages,
        chunks,
    }
}
