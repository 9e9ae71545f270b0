//! One pipeline, its traces and the what-if operations on them.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, TryLockError};

use serde::Serialize;

use super::exec::{Engine, Replay, Walk};
use super::pipeline::{PipelineDef, StepDef};
use super::template::escape;
use super::{
    EngineError, OverridePayload, ResolvedParams, RunEvent, RunMode, StepOutput, Trace,
    TraceFailure, TraceStep,
};
use crate::index::ScoredChunk;

/// Receives [`RunEvent`]s synchronously from the running thread.
pub type Observer = Arc<dyn Fn(&RunEvent) + Send + Sync>;

/// Traces kept: the active one and its predecessor.
const RETAINED_TRACES: usize = 2;

/// Consistent view of a session at one generation.
#[derive(Debug, Clone, Serialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    pub pipeline: Arc<PipelineDef>,
    pub pipeline_digest: String,
    pub generation: u64,
    pub trace: Option<Arc<Trace>>,
}

struct State {
    pipeline: Arc<PipelineDef>,
    traces: VecDeque<Arc<Trace>>,
    generation: u64,
    pruned: usize,
}

/// Runs on one session are serialized: a run started while another is in
/// progress fails with [`EngineError::Busy`]. Snapshots never block on runs.
pub struct Session {
    id: String,
    engine: Arc<Engine>,
    run_lock: Mutex<()>,
    state: RwLock<State>,
    observer: RwLock<Option<Observer>>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("id", &self.id).finish()
    }
}

fn new_session_id() -> String {
    static SEQ: AtomicU64 = AtomicU64::new(0);
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or_default();
    let seed = format!("{nanos}-{}-{}", std::process::id(), SEQ.fetch_add(1, Ordering::Relaxed));
    crate::fsutil::sha256_hex(seed.as_bytes())[..16].to_string()
}

impl Session {
    pub fn new(engine: Arc<Engine>, pipeline: PipelineDef) -> Result<Self, EngineError> {
        pipeline.validate()?;
        Ok(Self {
            id: new_session_id(),
            engine,
            run_lock: Mutex::new(()),
            state: RwLock::new(State {
                pipeline: Arc::new(pipeline),
                traces: VecDeque::new(),
                generation: 0,
                pruned: 0,
            }),
            observer: RwLock::new(None),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn set_observer(&self, observer: Option<Observer>) {
        *self.observer.write().expect("observer lock poisoned") = observer;
    }

    fn emit(&self, event: RunEvent) {
        if let Some(o) = self.observer.read().expect("observer lock poisoned").as_ref() {
            o(&event);
        }
    }

    fn lock_run(&self) -> Result<std::sync::MutexGuard<'_, ()>, EngineError> {
        match self.run_lock.try_lock() {
            Ok(g) => Ok(g),
            Err(TryLockError::WouldBlock) => Err(EngineError::Busy),
            Err(TryLockError::Poisoned(p)) => Ok(p.into_inner()),
        }
    }

    pub fn is_running(&self) -> bool {
        matches!(self.run_lock.try_lock(), Err(TryLockError::WouldBlock))
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        let s = self.state.read().expect("session state poisoned");
        SessionSnapshot {
            session_id: self.id.clone(),
            pipeline_digest: s.pipeline.digest(),
            pipeline: s.pipeline.clone(),
            generation: s.generation,
            trace: s.traces.back().cloned(),
        }
    }

    pub fn pipeline(&self) -> Arc<PipelineDef> {
        self.state.read().expect("session state poisoned").pipeline.clone()
    }

    pub fn active_trace(&self) -> Option<Arc<Trace>> {
        self.state.read().expect("session state poisoned").traces.back().cloned()
    }

    /// Traces currently held (active plus predecessors).
    pub fn retained_traces(&self) -> usize {
        self.state.read().expect("session state poisoned").traces.len()
    }

    /// Traces discarded over the session's lifetime.
    pub fn pruned_total(&self) -> usize {
        self.state.read().expect("session state poisoned").pruned
    }

    /// Replaces the pipeline definition without running it. Later resumes
    /// detect any change that affects recorded steps.
    pub fn set_pipeline(&self, pipeline: PipelineDef) -> Result<(), EngineError> {
        pipeline.validate()?;
        let _run = self.lock_run()?;
        self.state.write().expect("session state poisoned").pipeline = Arc::new(pipeline);
        Ok(())
    }

    /// Drops every trace except the active one and its predecessor. Returns
    /// how many were dropped.
    pub fn prune_stale(&self) -> usize {
        let mut s = self.state.write().expect("session state poisoned");
        prune(&mut s)
    }

    /// Runs the whole pipeline on `query` (or the Query step's default text
    /// when `query` is empty).
    pub fn run_pipeline(&self, query: &str) -> Result<Arc<Trace>, EngineError> {
        let _run = self.lock_run()?;
        if query.trim().is_empty() {
            let has_default = matches!(
                self.pipeline().steps.first(),
                Some(StepDef::Query { text: Some(t), .. }) if !t.trim().is_empty()
            );
            if !has_default {
                return Err(EngineError::EmptyQuery);
            }
        }
        let (pipeline, generation) = self.begin(RunMode::RunPipeline);
        let walk = self.engine.walk(&pipeline, query, None);
        self.finish(&pipeline, generation, None, walk, None)
    }

    /// Recomputes only step `index` with `payload`, from recorded upstream
    /// outputs. Later steps are kept but flagged stale.
    pub fn run_step(&self, index: usize, payload: Option<&OverridePayload>) -> Result<Arc<Trace>, EngineError> {
        let _run = self.lock_run()?;
        let prior = self.active_trace().ok_or(EngineError::NoTrace)?;
        check_index(&prior, index)?;
        let pipeline = self.pipeline();
        let replay = Replay {
            prior: &prior.steps,
            boundary: index,
            target: index,
            payload,
            stop_after_target: true,
        };
        // Validation errors (bad override, divergence) leave the session untouched.
        let mut walk = self.engine.walk(&pipeline, &prior.query, Some(replay));
        if let Some(e) = take_request_error(&mut walk) {
            return Err(e);
        }
        let (_, generation) = self.begin(RunMode::RunStep);
        if let Some(e) = walk.error {
            // The previous trace stays active.
            self.emit(RunEvent::RunFailed {
                generation,
                index: e.step_index(),
                code: e.root_cause().code().to_string(),
                message: e.to_string(),
            });
            return Err(e);
        }
        let mut steps = prior.steps.clone();
        steps[index] = walk.steps.into_iter().nth(index).expect("target step was executed");
        for s in &mut steps[index + 1..] {
            s.stale = true;
        }
        let walk = Walk { steps, error: None };
        self.finish(&pipeline, generation, Some(&prior), walk, Some(index))
    }

    /// Resumes at step `index` with `payload`: earlier steps replay from the
    /// trace, later steps run fresh.
    pub fn run_all(&self, index: usize, payload: Option<&OverridePayload>) -> Result<Arc<Trace>, EngineError> {
        let _run = self.lock_run()?;
        let prior = self.active_trace().ok_or(EngineError::NoTrace)?;
        check_index(&prior, index)?;
        let pipeline = self.pipeline();
        let first_stale = prior.steps.iter().position(|s| s.stale).unwrap_or(usize::MAX);
        let replay = Replay {
            prior: &prior.steps,
            boundary: index.min(first_stale),
            target: index,
            payload,
            stop_after_target: false,
        };
        let mut walk = self.engine.walk(&pipeline, &prior.query, Some(replay));
        if let Some(e) = take_request_error(&mut walk) {
            return Err(e);
        }
        let (_, generation) = self.begin(RunMode::RunAll);
        self.finish(&pipeline, generation, Some(&prior), walk, None)
    }

    fn begin(&self, mode: RunMode) -> (Arc<PipelineDef>, u64) {
        let (pipeline, generation) = {
            let mut s = self.state.write().expect("session state poisoned");
            s.generation += 1;
            (s.pipeline.clone(), s.generation)
        };
        self.emit(RunEvent::RunStarted { generation, mode });
        (pipeline, generation)
    }

    fn finish(
        &self,
        pipeline: &PipelineDef,
        generation: u64,
        prior: Option<&Trace>,
        walk: Walk,
        only_step: Option<usize>,
    ) -> Result<Arc<Trace>, EngineError> {
        for s in walk.steps.iter().filter(|s| only_step.is_none_or(|i| i == s.index)) {
            self.emit(RunEvent::StepFinished {
                generation,
                index: s.index,
                step_name: s.step_name.clone(),
                origin: s.origin,
            });
        }
        let query = match walk.steps.first().map(|s| &s.output) {
            Some(StepOutput::QueryText { text }) => text.clone(),
            _ => prior.map(|p| p.query.clone()).unwrap_or_default(),
        };
        let failure = walk.error.as_ref().map(|e| TraceFailure {
            index: e.step_index().unwrap_or(walk.steps.len()),
            step_name: match e {
                EngineError::StepFailure { step, .. } => step.clone(),
                _ => String::new(),
            },
            code: e.root_cause().code().to_string(),
            message: e.to_string(),
        });
        let trace = Arc::new(Trace {
            trace_id: format!("{}-{generation}", self.id),
            generation,
            lineage: prior.map(|p| p.trace_id.clone()),
            pipeline_digest: pipeline.digest(),
            query,
            steps: walk.steps,
            failure,
        });
        {
            let mut s = self.state.write().expect("session state poisoned");
            s.traces.push_back(trace.clone());
            prune(&mut s);
        }
        match walk.error {
            None => {
                self.emit(RunEvent::RunFinished {
                    generation,
                    steps: trace.steps.len(),
                });
                Ok(trace)
            }
            Some(e) => {
                self.emit(RunEvent::RunFailed {
                    generation,
                    index: e.step_index(),
                    code: e.root_cause().code().to_string(),
                    message: e.to_string(),
                });
                Err(e)
            }
        }
    }

    /// The active trace's step `index`.
    pub fn step(&self, index: usize) -> Result<TraceStep, EngineError> {
        let trace = self.active_trace().ok_or(EngineError::NoTrace)?;
        check_index(&trace, index)?;
        Ok(trace.steps[index].clone())
    }

    /// All chunks under step `index`'s configuration with its selection.
    pub fn step_chunks(&self, index: usize) -> Result<Vec<ScoredChunk>, EngineError> {
        let step = self.step(index)?;
        self.engine.all_chunks(&step)
    }

    /// The step definition behind trace step `index`, with the step's
    /// overrides and resolved parameters folded in.
    pub fn live_step_def(&self, index: usize) -> Result<StepDef, EngineError> {
        let step = self.step(index)?;
        let pipeline = self.pipeline();
        let (def, _) = pipeline.find(&step.step_name).ok_or_else(|| EngineError::ReplayDivergence {
            index,
            reason: format!("step `{}` is no longer in the pipeline", step.step_name),
        })?;
        let mut def = def.clone();
        let ov = &step.overrides;
        match (&mut def, &step.resolved_params, &step.output) {
            (StepDef::Query { text, .. }, _, StepOutput::QueryText { text: current }) => {
                *text = Some(current.clone());
            }
            (
                StepDef::Retrieve {
                    k,
                    chunk_size,
                    chunk_overlap,
                    method,
                    mmr_lambda,
                    manual,
                    ..
                },
                ResolvedParams::Retrieve {
                    k: rk,
                    chunk_size: rs,
                    chunk_overlap: ro,
                    method: rm,
                    mmr_lambda: rl,
                    manual: rman,
                    ..
                },
                _,
            ) => {
                *k = Some(*rk);
                *chunk_size = Some(*rs);
                *chunk_overlap = Some(*ro);
                *method = Some(*rm);
                *mmr_lambda = rl.or(*mmr_lambda);
                *manual = rman.clone();
            }
            (
                StepDef::Llm {
                    prompt,
                    max_tokens,
                    temperature,
                    output,
                    ..
                },
                ResolvedParams::Llm {
                    max_tokens: rt,
                    temperature: rtemp,
                    output: rout,
                    ..
                },
                _,
            ) => {
                if let Some(p) = &ov.prompt {
                    *prompt = escape(p);
                }
                *max_tokens = Some(*rt);
                *temperature = Some(*rtemp);
                *output = rout.clone();
            }
            (StepDef::Answer { output, .. }, ResolvedParams::Answer { output: rout, .. }, _) => {
                *output = rout.clone();
            }
            _ => {}
        }
        Ok(def)
    }

    /// `[[steps]]` TOML fragment for step `index`, parseable as part of a
    /// pipeline file.
    pub fn export_step(&self, index: usize) -> Result<String, EngineError> {
        #[derive(Serialize)]
        struct Fragment<'a> {
            steps: [&'a StepDef; 1],
        }
        let def = self.live_step_def(index)?;
        Ok(toml::to_string(&Fragment { steps: [&def] }).expect("step serializes to TOML"))
    }
}

fn prune(s: &mut State) -> usize {
    let mut n = 0;
    while s.traces.len() > RETAINED_TRACES {
        s.traces.pop_front();
        n += 1;
    }
    s.pruned += n;
    n
}

fn check_index(trace: &Trace, index: usize) -> Result<(), EngineError> {
    if index >= trace.steps.len() {
        return Err(EngineError::StepNotFound {
            index,
            len: trace.steps.len(),
        });
    }
    Ok(())
}

/// Errors about the request itself (bad override, divergence) as opposed to
/// a step that failed while executing.
fn take_request_error(walk: &mut Walk) -> Option<EngineError> {
    match walk.error {
        Some(EngineError::StepFailure { .. }) | None => None,
        Some(_) => walk.error.take(),
    }
}
