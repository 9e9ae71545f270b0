//! HTTP API over one ragforge debugging session.

mod error;
mod views;

use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use ragforge_core::embedder::Embedder;
use ragforge_core::engine::{Engine, OverridePayload, PipelineDef, RunEvent, Session, Trace};
use ragforge_core::evalstore::{
    check_similarity, display_similarity, similarity, GoldenAnswer, GoldenStore,
};
use ragforge_core::project::Project;

pub use error::{status_for, ApiError, ERROR_CODES};
pub use views::{
    histogram, page_chunks, CellOutput, CellView, ChunkPage, GoldenView, HistogramView,
    SnapshotView, DEFAULT_PAGE_SIZE, HISTOGRAM_BINS, MAX_PAGE_SIZE,
};

pub const DEFAULT_PORT: u16 = 8642;
pub const OPENAPI_JSON: &str = include_str!("../assets/openapi.json");
const INDEX_HTML: &str = include_str!("../assets/index.html");
const EVENT_BUFFER: usize = 1024;

struct Inner {
    session: Session,
    goldens: GoldenStore,
    embedder: Embedder,
    /// Re-read before each run so edits on disk reach the session.
    pipeline_path: Option<PathBuf>,
    events: broadcast::Sender<RunEvent>,
}

/// Shared server state: the session, golden store and event fan-out.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(
        engine: Arc<Engine>,
        pipeline: PipelineDef,
        goldens: GoldenStore,
        pipeline_path: Option<PathBuf>,
    ) -> Result<Self, ApiError> {
        let embedder = engine.embedder().clone();
        let session = Session::new(engine, pipeline)?;
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        let tx = events.clone();
        session.set_observer(Some(Arc::new(move |e: &RunEvent| {
            // No subscribers is fine.
            let _ = tx.send(e.clone());
        })));
        Ok(Self {
            inner: Arc::new(Inner {
                session,
                goldens,
                embedder,
                pipeline_path,
                events,
            }),
        })
    }

    pub fn from_project(project: &Project) -> Result<Self, ApiError> {
        let pipeline = project.load_pipeline()?;
        Self::new(
            project.engine().clone(),
            pipeline,
            project.goldens().clone(),
            Some(project.pipeline_path()),
        )
    }

    pub fn session(&self) -> &Session {
        &self.inner.session
    }

    pub fn subscribe(&self) -> broadcast::Receiver<RunEvent> {
        self.inner.events.subscribe()
    }

    /// Picks up an edited pipeline file. A changed definition is installed
    /// so that resumes can detect divergence from the recorded trace.
    fn sync_pipeline(&self) -> Result<(), ApiError> {
        let Some(path) = &self.inner.pipeline_path else {
            return Ok(());
        };
        if !path.exists() {
            return Ok(());
        }
        let def = PipelineDef::load(path)?;
        if def.digest() != self.inner.session.pipeline().digest() {
            tracing::info!(path = %path.display(), "pipeline file changed; reloading");
            self.inner.session.set_pipeline(def)?;
        }
        Ok(())
    }

    fn golden_view(&self, trace: &Trace) -> Option<GoldenView> {
        let answer = trace.final_answer()?;
        let golden = self.inner.goldens.get(&trace.query).ok()??;
        let s = check_similarity(answer, &golden, &self.inner.embedder).ok()?;
        Some(GoldenView {
            query_id: golden.query_id,
            similarity: s,
            display: display_similarity(s),
        })
    }

    pub fn snapshot_view(&self) -> SnapshotView {
        let snap = self.inner.session.snapshot();
        SnapshotView::new(
            snap.session_id,
            snap.pipeline,
            snap.pipeline_digest,
            snap.trace.as_deref(),
            |t| self.golden_view(t),
        )
    }

    fn active_trace(&self) -> Result<Arc<Trace>, ApiError> {
        self.inner
            .session
            .active_trace()
            .ok_or_else(|| ApiError::new("NoTrace", "no pipeline run yet"))
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/api/schema", get(schema))
        .route("/api/session", get(get_session))
        .route("/api/run", post(run_pipeline))
        .route("/api/steps/{i}/run_step", post(run_step))
        .route("/api/steps/{i}/run_all", post(run_all))
        .route("/api/steps/{i}/chunks", get(step_chunks))
        .route("/api/steps/{i}/histogram", get(step_histogram))
        .route("/api/answers/save", post(save_answer))
        .route("/api/answers/check", post(check_answer))
        .route("/api/export/step/{i}", get(export_step))
        .route("/api/events", get(events))
        .fallback(not_found)
        .with_state(state)
}

/// Serves `state` on `addr` until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn index() -> Html<&'static str> {
    Html(INDEX_HTML)
}

async fn schema() -> Response {
    ([(header::CONTENT_TYPE, "application/json")], OPENAPI_JSON).into_response()
}

async fn not_found() -> ApiError {
    ApiError::new("NotFound", "no such endpoint")
}

async fn get_session(State(st): State<AppState>) -> Result<Json<SnapshotView>, ApiError> {
    blocking(move || Ok(Json(st.snapshot_view()))).await
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunBody {
    #[serde(default)]
    query_text: String,
}

async fn run_pipeline(State(st): State<AppState>, body: Bytes) -> Result<Json<SnapshotView>, ApiError> {
    let req: RunBody = if body.is_empty() { RunBody::default() } else { parse_json(&body)? };
    blocking(move || {
        st.sync_pipeline()?;
        st.inner.session.run_pipeline(&req.query_text)?;
        Ok(Json(st.snapshot_view()))
    })
    .await
}

/// An empty body or `null` is the identity override.
fn parse_override(body: &Bytes) -> Result<Option<OverridePayload>, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(None);
    }
    parse_json::<Option<OverridePayload>>(body)
}

async fn run_step(
    State(st): State<AppState>,
    Path(i): Path<usize>,
    body: Bytes,
) -> Result<Json<SnapshotView>, ApiError> {
    let payload = parse_override(&body)?;
    blocking(move || {
        st.sync_pipeline()?;
        st.inner.session.run_step(i, payload.as_ref())?;
        Ok(Json(st.snapshot_view()))
    })
    .await
}

async fn run_all(
    State(st): State<AppState>,
    Path(i): Path<usize>,
    body: Bytes,
) -> Result<Json<SnapshotView>, ApiError> {
    let payload = parse_override(&body)?;
    blocking(move || {
        st.sync_pipeline()?;
        st.inner.session.run_all(i, payload.as_ref())?;
        Ok(Json(st.snapshot_view()))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct ChunkQuery {
    search: Option<String>,
    page: Option<usize>,
    page_size: Option<usize>,
}

fn step_of(trace: &Trace, i: usize) -> Result<&ragforge_core::engine::TraceStep, ApiError> {
    trace.steps.get(i).ok_or_else(|| {
        ApiError::from(ragforge_core::engine::EngineError::StepNotFound {
            index: i,
            len: trace.steps.len(),
        })
    })
}

async fn step_chunks(
    State(st): State<AppState>,
    Path(i): Path<usize>,
    Query(q): Query<ChunkQuery>,
) -> Result<Json<ChunkPage>, ApiError> {
    let page = q.page.unwrap_or(1);
    let page_size = q.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
    if page == 0 || page_size == 0 || page_size > MAX_PAGE_SIZE {
        return Err(ApiError::bad_request(format!(
            "page must be >= 1 and page_size within 1..={MAX_PAGE_SIZE}"
        )));
    }
    blocking(move || {
        let trace = st.active_trace()?;
        let all = st.inner.session.engine().all_chunks(step_of(&trace, i)?)?;
        Ok(Json(page_chunks(i, all, q.search.as_deref(), page, page_size)))
    })
    .await
}

async fn step_histogram(
    State(st): State<AppState>,
    Path(i): Path<usize>,
) -> Result<Json<HistogramView>, ApiError> {
    blocking(move || {
        let trace = st.active_trace()?;
        let all = st.inner.session.engine().all_chunks(step_of(&trace, i)?)?;
        Ok(Json(histogram(i, &all)))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SaveBody {
    query_text: Option<String>,
    answer_text: Option<String>,
    edited: Option<bool>,
}

/// Defaults to the active trace's query and final answer.
async fn save_answer(State(st): State<AppState>, body: Bytes) -> Result<Json<GoldenAnswer>, ApiError> {
    let req: SaveBody = if body.is_empty() { SaveBody::default() } else { parse_json(&body)? };
    blocking(move || {
        let trace = st.inner.session.active_trace();
        let run_answer = trace.as_ref().and_then(|t| {
            let edited = t.steps.last().is_some_and(|s| {
                matches!(s.output, ragforge_core::engine::StepOutput::FinalAnswer { edited: true, .. })
            });
            t.final_answer().map(|a| (a.to_string(), edited))
        });
        let query = req
            .query_text
            .or_else(|| trace.as_ref().map(|t| t.query.clone()))
            .ok_or_else(|| ApiError::new("NoTrace", "no query given and no run yet"))?;
        let (answer, edited) = match (req.answer_text, &run_answer) {
            (Some(a), Some((ran, e))) => {
                let differs = &a != ran;
                (a, req.edited.unwrap_or(*e || differs))
            }
            (Some(a), None) => (a, req.edited.unwrap_or(true)),
            (None, Some((ran, e))) => (ran.clone(), req.edited.unwrap_or(*e)),
            (None, None) => return Err(ApiError::new("NoTrace", "no answer given and no run yet")),
        };
        let digest = st.inner.session.pipeline().digest();
        Ok(Json(st.inner.goldens.save_answer(&query, &answer, &digest, edited)?))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckBody {
    query_text: Option<String>,
    answer_text: Option<String>,
    /// Compare against this text instead of the saved golden.
    golden_text: Option<String>,
}

#[derive(Debug, Serialize)]
struct CheckResult {
    similarity: f64,
    display: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    query_id: Option<String>,
}

async fn check_answer(State(st): State<AppState>, body: Bytes) -> Result<Json<CheckResult>, ApiError> {
    let req: CheckBody = if body.is_empty() { CheckBody::default() } else { parse_json(&body)? };
    blocking(move || {
        let trace = st.inner.session.active_trace();
        let answer = req
            .answer_text
            .or_else(|| trace.as_ref().and_then(|t| t.final_answer().map(str::to_string)))
            .ok_or_else(|| ApiError::new("NoTrace", "no answer given and no run yet"))?;
        let (golden_text, query_id) = match req.golden_text {
            Some(g) => (g, None),
            None => {
                let query = req
                    .query_text
                    .or_else(|| trace.as_ref().map(|t| t.query.clone()))
                    .ok_or_else(|| ApiError::new("NoTrace", "no query given and no run yet"))?;
                let g = st
                    .inner
                    .goldens
                    .get(&query)?
                    .ok_or_else(|| ApiError::new("UnknownQuery", format!("no golden answer for {query:?}")))?;
                (g.answer_text, Some(g.query_id))
            }
        };
        let s = similarity(&answer, &golden_text, &st.inner.embedder)?;
        Ok(Json(CheckResult {
            similarity: s,
            display: display_similarity(s),
            query_id,
        }))
    })
    .await
}

async fn export_step(State(st): State<AppState>, Path(i): Path<usize>) -> Result<Response, ApiError> {
    blocking(move || {
        let text = st.inner.session.export_step(i)?;
        Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], text).into_response())
    })
    .await
}

/// Newline-delimited JSON run events for as long as the client listens.
async fn events(State(st): State<AppState>) -> Response {
    let rx = st.subscribe();
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(e) => {
                    let mut line = serde_json::to_string(&e).expect("event serializes");
                    line.push('\n');
                    return Some((Ok::<_, Infallible>(line), rx));
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    tracing::warn!("event stream lagged; {n} events dropped");
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    (
        StatusCode::OK,
        [
            (header::CONTENT_TYPE, "application/x-ndjson"),
            (header::CACHE_CONTROL, "no-cache"),
        ],
        Body::from_stream(stream),
    )
        .into_response()
}
