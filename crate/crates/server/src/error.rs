use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

use ragforge_core::engine::EngineError;
use ragforge_core::evalstore::EvalError;
use ragforge_core::project::ProjectError;

/// Error body for every failing endpoint. `code` comes from [`ERROR_CODES`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_index: Option<usize>,
}

/// Every `code` an error body can carry, with its HTTP status.
pub const ERROR_CODES: &[(&str, u16)] = &[
    ("BadRequest", 422),
    ("EmptyQuery", 422),
    ("EmptyText", 422),
    ("IncompatibleOverride", 422),
    ("InvalidPipeline", 422),
    ("InvalidThreshold", 422),
    ("ParseError", 422),
    ("PromptTooLarge", 422),
    ("TemplateError", 422),
    ("UnknownChunk", 422),
    ("NoTrace", 404),
    ("NotFound", 404),
    ("NotRetriever", 404),
    ("StepNotFound", 404),
    ("UnknownQuery", 404),
    ("Busy", 409),
    ("ReplayDivergence", 409),
    ("NoGoldens", 409),
    ("IndexMissing", 500),
    ("IndexError", 500),
    ("IoError", 500),
    ("StepFailure", 500),
    ("Internal", 500),
    ("EmbedError", 502),
    ("LlmError", 502),
    ("ProviderUnavailable", 502),
];

pub fn status_for(code: &str) -> StatusCode {
    ERROR_CODES
        .iter()
        .find(|(c, _)| *c == code)
        .and_then(|(_, s)| StatusCode::from_u16(*s).ok())
        .unwrap_or(StatusCode::INTERNAL_SERVER_ERROR)
}

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status_for(code),
            code: code.to_string(),
            message: message.into(),
            step_index: None,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new("BadRequest", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new("Internal", message)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        // Wrapped step failures report the underlying cause.
        let mut out = Self::new(e.root_cause().code(), e.to_string());
        out.step_index = e.step_index();
        out
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        Self::new(e.code(), e.to_string())
    }
}

impl From<ProjectError> for ApiError {
    fn from(e: ProjectError) -> Self {
        match e {
            ProjectError::Engine(e) => e.into(),
            ProjectError::Eval(e) => e.into(),
            other => Self::new("IoError", other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self)).into_response()
    }
}
