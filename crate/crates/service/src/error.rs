use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use thiserror::Error;

use crate::session::Status;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("session `{0}` has finished")]
    SessionFinished(String),
    #[error("cannot go from {from:?} to {to:?}")]
    InvalidTransition { from: Status, to: Status },
    #[error("scorer unavailable: {0}")]
    Scorer(String),
    #[error("engine failure: {0}")]
    Engine(String),
    #[error("session `{0}` is gone")]
    Closed(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownScenario(_) => "unknown_scenario",
            Self::UnknownSession(_) => "unknown_session",
            Self::BadConfig(_) => "bad_config",
            Self::SessionFinished(_) => "session_finished",
            Self::InvalidTransition { .. } => "invalid_transition",
            Self::Scorer(_) => "scorer",
            Self::Engine(_) => "engine",
            Self::Closed(_) => "closed",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            Self::UnknownScenario(_) | Self::UnknownSession(_) => StatusCode::NOT_FOUND,
            Self::BadConfig(_) => StatusCode::BAD_REQUEST,
            Self::SessionFinished(_) | Self::InvalidTransition { .. } => StatusCode::CONFLICT,
            Self::Scorer(_) => StatusCode::BAD_GATEWAY,
            Self::Engine(_) | Self::Closed(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.code(), "message": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}
