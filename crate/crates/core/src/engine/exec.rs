//! Step execution and the replay walk shared by every run mode.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use super::pipeline::{PipelineDef, RetrieverPatch, StepDef};
use super::template::{truthy, Template};
use super::{
    AppliedOverrides, EngineError, Origin, OverridePayload, ResolvedParams, StepOutput,
    TraceStep,
};
use crate::corpus::ChunkConfig;
use crate::embedder::Embedder;
use crate::fsutil::sha256_hex;
use crate::index::{rank_indices, IndexKey, IndexStore, RetrievalMethod, ScoredChunk};
use crate::llm::{parse_json_list, Llm, LlmRequest, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE};

/// Providers and indexes a pipeline runs against. Cheap to share.
pub struct Engine {
    store: Arc<IndexStore>,
    corpus_digest: String,
    embedder: Embedder,
    llm: Llm,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("corpus_digest", &self.corpus_digest)
            .field("embedder", &self.embedder.provider_id())
            .field("llm", &self.llm.provider_id())
            .finish()
    }
}

/// How the walk treats recorded steps.
pub(crate) struct Replay<'a> {
    pub prior: &'a [TraceStep],
    /// Steps before this index come from `prior`.
    pub boundary: usize,
    /// Step that receives `payload`.
    pub target: usize,
    pub payload: Option<&'a OverridePayload>,
    /// Stop right after the target (single-step recomputation).
    pub stop_after_target: bool,
}

/// Partial or complete result of a walk.
pub(crate) struct Walk {
    pub steps: Vec<TraceStep>,
    pub error: Option<EngineError>,
}

enum Flow {
    Continue,
    Stop,
}

/// Values visible to templates.
#[derive(Default)]
struct Env {
    values: HashMap<String, String>,
    lists: HashMap<String, Vec<String>>,
    /// Foreach body outputs of the current iteration.
    local: HashMap<String, String>,
    /// Body outputs across iterations, joined when referenced outside.
    gathered: HashMap<String, Vec<String>>,
}

impl Env {
    fn lookup(&self, name: &str) -> Option<String> {
        self.local.get(name).or_else(|| self.values.get(name)).cloned()
    }

    fn record(&mut self, name: &str, in_body: bool, output: Option<&StepOutput>) {
        let text = output.map(StepOutput::render).unwrap_or_default();
        if let Some(StepOutput::Generation {
            parsed: Some(list), ..
        }) = output
        {
            self.lists.insert(name.to_string(), list.clone());
        }
        if in_body {
            if !text.is_empty() {
                self.gathered.entry(name.to_string()).or_default().push(text.clone());
            }
            self.local.insert(name.to_string(), text);
        } else {
            self.values.insert(name.to_string(), text);
        }
    }
}

impl Engine {
    pub fn new(store: Arc<IndexStore>, corpus_digest: &str, embedder: Embedder, llm: Llm) -> Self {
        Self {
            store,
            corpus_digest: corpus_digest.to_string(),
            embedder,
            llm,
        }
    }

    pub fn store(&self) -> &Arc<IndexStore> {
        &self.store
    }

    pub fn corpus_digest(&self) -> &str {
        &self.corpus_digest
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn llm(&self) -> &Llm {
        &self.llm
    }

    pub(crate) fn retrieve_key(&self, params: &ResolvedParams) -> Option<IndexKey> {
        match params {
            ResolvedParams::Retrieve {
                chunk_size,
                chunk_overlap,
                method,
                ..
            } => {
                let cfg = ChunkConfig::new(*chunk_size, *chunk_overlap).ok()?;
                Some(IndexKey::new(&self.corpus_digest, cfg, *method))
            }
            _ => None,
        }
    }

    /// Every chunk under a Retrieve step's configuration, most relevant
    /// first, with `selected` copied from the step's output.
    pub fn all_chunks(&self, step: &TraceStep) -> Result<Vec<ScoredChunk>, EngineError> {
        let key = self
            .retrieve_key(&step.resolved_params)
            .ok_or(EngineError::NotRetriever { index: step.index })?;
        let ResolvedParams::Retrieve { query, .. } = &step.resolved_params else {
            unreachable!("retrieve_key only accepts retrieve params");
        };
        let selected: std::collections::HashSet<&str> =
            step.output.selected_chunk_ids().into_iter().collect();
        let mut all = self.store.score_all(&key, query, &self.embedder)?;
        for c in &mut all {
            c.selected = selected.contains(c.chunk.chunk_id.as_str());
        }
        Ok(all)
    }

    /// Walks the pipeline. `query` feeds the Query step unless overridden.
    pub(crate) fn walk(&self, pipeline: &PipelineDef, query: &str, replay: Option<Replay<'_>>) -> Walk {
        let mut w = Walker {
            engine: self,
            pipeline,
            query,
            replay,
            env: Env::default(),
            steps: Vec::new(),
        };
        let error = w.run().err();
        Walk {
            steps: w.steps,
            error,
        }
    }
}

struct Walker<'a> {
    engine: &'a Engine,
    pipeline: &'a PipelineDef,
    query: &'a str,
    replay: Option<Replay<'a>>,
    env: Env,
    steps: Vec<TraceStep>,
}

impl Walker<'_> {
    fn run(&mut self) -> Result<(), EngineError> {
        for def in &self.pipeline.steps {
            match def {
                StepDef::Foreach {
                    over, item, body, ..
                } => {
                    let list = self.env.lists.get(over).cloned().unwrap_or_default();
                    for (it, value) in list.iter().enumerate() {
                        self.env.local.clear();
                        self.env.local.insert(item.clone(), value.clone());
                        for b in body {
                            if let Flow::Stop = self.instance(b, Some(it))? {
                                return Ok(());
                            }
                        }
                    }
                    self.env.local.clear();
                    for b in body {
                        let joined = self
                            .env
                            .gathered
                            .remove(b.name())
                            .unwrap_or_default()
                            .join("\n\n");
                        self.env.values.insert(b.name().to_string(), joined);
                    }
                }
                other => {
                    if let Flow::Stop = self.instance(other, None)? {
                        return Ok(());
                    }
                }
            }
        }
        Ok(())
    }

    fn render(&self, step: &str, src: &str) -> Result<String, EngineError> {
        let t = Template::parse(src).map_err(|e| EngineError::InvalidPipeline(format!("`{step}`: {e}")))?;
        t.render(|p| self.env.lookup(p)).map_err(|placeholder| EngineError::Template {
            step: step.to_string(),
            placeholder,
        })
    }

    fn instance(&mut self, def: &StepDef, iteration: Option<usize>) -> Result<Flow, EngineError> {
        let index = self.steps.len();
        let name = def.name();
        let fail = |cause: EngineError| EngineError::StepFailure {
            index,
            step: name.to_string(),
            cause: Box::new(cause),
        };

        let when = match def {
            StepDef::Retrieve { when, .. } | StepDef::Llm { when, .. } => when.as_deref(),
            _ => None,
        };
        if let Some(w) = when {
            if !truthy(&self.render(name, w).map_err(fail)?) {
                self.env.record(name, iteration.is_some(), None);
                return Ok(Flow::Continue);
            }
        }

        let mut overrides = AppliedOverrides::default();
        let mut origin = Origin::Recorded;
        let mut stop = false;
        if let Some(r) = &self.replay {
            let recorded = r.prior.get(index);
            let same_shape = recorded.is_some_and(|rec| {
                rec.step_name == name && rec.kind == def.kind() && rec.iteration == iteration
            });
            if index < r.boundary || index == r.target {
                let Some(rec) = recorded.filter(|_| same_shape) else {
                    return Err(EngineError::ReplayDivergence {
                        index,
                        reason: format!(
                            "expected {} `{name}`, the recorded trace has {}",
                            def.kind(),
                            recorded.map_or("no step".to_string(), |r| format!(
                                "{} `{}`",
                                r.kind, r.step_name
                            ))
                        ),
                    });
                };
                overrides = rec.overrides.clone();
                if index < r.boundary {
                    let params = self.resolve(def, &overrides).map_err(fail)?;
                    if !rec.stale && params != rec.resolved_params {
                        return Err(EngineError::ReplayDivergence {
                            index,
                            reason: format!("resolved parameters of `{name}` changed"),
                        });
                    }
                    let mut step = rec.clone();
                    step.index = index;
                    step.origin = Origin::Replayed;
                    step.stale = false;
                    self.env.record(name, iteration.is_some(), Some(&step.output));
                    self.steps.push(step);
                    return Ok(Flow::Continue);
                }
                if let Some(p) = r.payload {
                    overrides.apply(index, def.kind(), p)?;
                    if let Err(e @ EngineError::IncompatibleOverride { .. }) =
                        self.resolve(def, &overrides)
                    {
                        return Err(e);
                    }
                }
                origin = Origin::Overridden;
                stop = r.stop_after_target;
            } else if let Some(rec) = r
                .prior
                .iter()
                .find(|s| s.step_name == name && s.iteration == iteration)
            {
                // Recomputed steps keep their parameter edits. A hand-edited
                // output belonged to the old inputs and is dropped.
                overrides = rec.overrides.clone();
                overrides.edited_output = None;
            }
        }

        let started = Instant::now();
        let params = self.resolve(def, &overrides).map_err(fail)?;
        let output = self.execute(&params).map_err(fail)?;
        let step = TraceStep {
            index,
            step_name: name.to_string(),
            kind: def.kind(),
            iteration,
            input_digest: sha256_hex(&serde_json::to_vec(&params).expect("params serialize")),
            resolved_params: params,
            output,
            duration_ms: started.elapsed().as_millis() as u64,
            origin,
            stale: false,
            overrides,
        };
        self.env.record(name, iteration.is_some(), Some(&step.output));
        self.steps.push(step);
        Ok(if stop { Flow::Stop } else { Flow::Continue })
    }

    fn resolve(&self, def: &StepDef, ov: &AppliedOverrides) -> Result<ResolvedParams, EngineError> {
        Ok(match def {
            StepDef::Query { text, .. } => {
                let text = ov
                    .query_text
                    .clone()
                    .or_else(|| Some(self.query.to_string()).filter(|q| !q.trim().is_empty()))
                    .or_else(|| text.clone())
                    .unwrap_or_default();
                ResolvedParams::Query { text }
            }
            StepDef::Retrieve {
                name,
                query,
                manual,
                ..
            } => {
                let r = RetrieverPatch::from_step(def)
                    .merged(ov.retriever)
                    .resolve(&self.pipeline.defaults);
                ChunkConfig::new(r.chunk_size, r.chunk_overlap).map_err(|e| {
                    EngineError::IncompatibleOverride {
                        index: self.steps.len(),
                        reason: e.to_string(),
                    }
                })?;
                ResolvedParams::Retrieve {
                    query: self.render(name, query)?,
                    k: r.k,
                    chunk_size: r.chunk_size,
                    chunk_overlap: r.chunk_overlap,
                    method: r.method,
                    mmr_lambda: (r.method == RetrievalMethod::Mmr).then_some(r.mmr_lambda),
                    manual: ov.manual.clone().or_else(|| manual.clone()),
                }
            }
            StepDef::Llm {
                name,
                prompt,
                max_tokens,
                temperature,
                model,
                parse,
                output,
                ..
            } => ResolvedParams::Llm {
                prompt: match &ov.prompt {
                    Some(p) => p.clone(),
                    None => self.render(name, prompt)?,
                },
                max_tokens: ov.max_tokens.or(*max_tokens).unwrap_or(DEFAULT_MAX_TOKENS),
                temperature: ov.temperature.or(*temperature).unwrap_or(DEFAULT_TEMPERATURE),
                model: model
                    .clone()
                    .unwrap_or_else(|| self.engine.llm.default_model().to_string()),
                json_list_key: parse.as_ref().map(|p| p.json_list_key.clone()),
                output: ov.edited_output.clone().or_else(|| output.clone()),
            },
            StepDef::Answer {
                name,
                template,
                output,
            } => ResolvedParams::Answer {
                text: self.render(name, template)?,
                output: ov.edited_output.clone().or_else(|| output.clone()),
            },
            StepDef::Foreach { .. } => unreachable!("foreach is expanded by the walker"),
        })
    }

    fn execute(&self, params: &ResolvedParams) -> Result<StepOutput, EngineError> {
        let e = self.engine;
        match params {
            ResolvedParams::Query { text } => {
                if text.trim().is_empty() {
                    return Err(EngineError::EmptyQuery);
                }
                Ok(StepOutput::QueryText { text: text.clone() })
            }
            ResolvedParams::Retrieve {
                query,
                k,
                mmr_lambda,
                manual,
                ..
            } => {
                let key = e.retrieve_key(params).expect("validated chunk config");
                match manual {
                    Some(manual) => {
                        let all = e.store.score_all(&key, query, &e.embedder)?;
                        let by_id: HashMap<&str, &ScoredChunk> =
                            all.iter().map(|s| (s.chunk.chunk_id.as_str(), s)).collect();
                        let mut chunks = Vec::with_capacity(manual.len());
                        let mut scores = Vec::with_capacity(manual.len());
                        for m in manual {
                            let s = by_id
                                .get(m.chunk_id.as_str())
                                .ok_or_else(|| EngineError::UnknownChunk(m.chunk_id.clone()))?;
                            chunks.push(s.chunk.clone());
                            scores.push(s.score);
                        }
                        let mut ranked = rank_indices(&chunks, &scores, usize::MAX, false);
                        for r in &mut ranked {
                            r.selected = manual
                                .iter()
                                .any(|m| m.selected && m.chunk_id == r.chunk.chunk_id);
                        }
                        Ok(StepOutput::Chunks {
                            chunks: ranked,
                            warnings: Vec::new(),
                        })
                    }
                    None => {
                        let lambda = mmr_lambda.unwrap_or(crate::index::DEFAULT_MMR_LAMBDA);
                        let r = e.store.retrieve(&key, query, *k, lambda, &e.embedder)?;
                        Ok(StepOutput::Chunks {
                            chunks: r.chunks,
                            warnings: r.warnings,
                        })
                    }
                }
            }
            ResolvedParams::Llm {
                prompt,
                max_tokens,
                temperature,
                model,
                json_list_key,
                output,
            } => {
                let (text, edited, response) = match output {
                    Some(text) => (text.clone(), true, None),
                    None => {
                        let req = LlmRequest {
                            prompt: prompt.clone(),
                            max_tokens: *max_tokens,
                            temperature: *temperature,
                            model: model.clone(),
                        };
                        let resp = e.llm.generate(&req)?;
                        (resp.text.clone(), false, Some(resp))
                    }
                };
                let parsed = match json_list_key {
                    Some(key) => Some(parse_json_list(&text, key)?),
                    None => None,
                };
                Ok(StepOutput::Generation {
                    text,
                    edited,
                    response,
                    parsed,
                })
            }
            ResolvedParams::Answer { text, output } => Ok(StepOutput::FinalAnswer {
                text: output.clone().unwrap_or_else(|| text.clone()),
                edited: output.is_some(),
            }),
        }
    }
}
