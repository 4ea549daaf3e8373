//! HTTP session service around the duet stream engine.
//!
//! Commands are plain JSON POSTs; each session serializes them through its
//! own queue. Engine events are pushed as server-sent events on
//! `GET /sessions/{id}/events`.

pub mod api;
pub mod error;
pub mod session;

pub use api::{router, serve, AppState, ScorerBackend};
pub use error::ServiceError;
pub use session::{ServiceEvent, SessionCore, SessionInfo, Status};
