//! Streaming video-text duet interaction: transcripts, scorers, response
//! policies, dataset construction and evaluation metrics.
//!
//! Score-valued types are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod engine;
pub mod evaluation;
pub mod metrics;
pub mod policy;
pub mod prompts;
pub mod scalar;
pub mod scenario;
pub mod scorer;
pub mod transcript;
pub mod wire;

pub use scalar::Scalar;

pub type PolicyConfig = policy::PolicyConfig<f64>;
pub type ResponsePolicy = policy::ResponsePolicy<f64>;
pub type ScoreReport = scorer::ScoreReport<f64>;
pub type ScriptedScript = scorer::ScriptedScript<f64>;
pub type ScriptedScorer = scorer::ScriptedScorer<f64>;
pub type SessionConfig = engine::SessionConfig<f64>;
pub type SessionState = engine::SessionState<f64>;
pub type SessionResult = engine::SessionResult<f64>;
pub type ScoreTrace = engine::ScoreTrace<f64>;
pub type EngineEvent = engine::EngineEvent<f64>;
pub type JudgeMatrix = metrics::JudgeMatrix<f64>;
pub type Scenario = scenario::Scenario<f64>;
pub type ScenarioLibrary = scenario::ScenarioLibrary<f64>;
