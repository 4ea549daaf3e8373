//! The contract through which the engine obtains per-frame scores and
//! generated responses.
//!
//! A scorer consumes the conversation as a sequence of [`ScorerEvent`]s and
//! answers every frame with a [`ScoreReport`]. Assistant text is sent back
//! with a `committed` flag; an uncommitted response must not enter the
//! scorer's context (the "remove previous responses" mode).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transcript::FrameRef;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("scorer unavailable: {0}")]
    Unavailable(String),
    #[error("scorer protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("generate() called before any frame was observed")]
    NoFrameObserved,
}

/// Informative and relevance scores for one frame, both in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreReport<T> {
    informative: T,
    relevance: T,
}

impl<T: Scalar> ScoreReport<T> {
    /// Fails with a protocol violation when either score leaves [0, 1].
    /// Scores are never clamped.
    pub fn new(informative: T, relevance: T) -> Result<Self, ScorerError> {
        if !informative.in_unit_interval() || !relevance.in_unit_interval() {
            return Err(ScorerError::ProtocolViolation(format!(
                "scores out of range: inf={informative}, rel={relevance}"
            )));
        }
        Ok(Self {
            informative,
            relevance,
        })
    }

    pub fn informative(&self) -> T {
        self.informative
    }

    pub fn relevance(&self) -> T {
        self.relevance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScorerEvent {
    SystemText(String),
    UserText {
        text: String,
        time: f64,
    },
    Frame(FrameRef),
    AssistantText {
        text: String,
        time: f64,
        committed: bool,
    },
}

pub trait Scorer<T: Scalar> {
    /// Feeds one event. Frame events yield a report, text events yield none.
    fn observe(&mut self, event: &ScorerEvent) -> Result<Option<ScoreReport<T>>, ScorerError>;

    /// Generates a response for the current context. Atomic with respect to
    /// the frame stream.
    fn generate(&mut self) -> Result<String, ScorerError>;
}

impl<T: Scalar, S: Scorer<T> + ?Sized> Scorer<T> for Box<S> {
    fn observe(&mut self, event: &ScorerEvent) -> Result<Option<ScoreReport<T>>, ScorerError> {
        (**self).observe(event)
    }

    fn generate(&mut self) -> Result<String, ScorerError> {
        (**self).generate()
    }
}

impl<T: Scalar, S: Scorer<T> + ?Sized> Scorer<T> for &mut S {
    fn observe(&mut self, event: &ScorerEvent) -> Result<Option<ScoreReport<T>>, ScorerError> {
        (**self).observe(event)
    }

    fn generate(&mut self) -> Result<String, ScorerError> {
        (**self).generate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ScriptedFrame<T> {
    pub inf: T,
    pub rel: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

/// Scores and responses keyed by frame index.
///
/// File format: `{"frames":[{"inf":..,"rel":..,"response":..}],"default_response":..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ScriptedScript<T> {
    pub frames: Vec<ScriptedFrame<T>>,
    #[serde(default)]
    pub default_response: String,
}

impl<T: Scalar> ScriptedScript<T> {
    pub fn from_scores(scores: &[(T, T)], default_response: impl Into<String>) -> Self {
        Self {
            frames: scores
                .iter()
                .map(|&(inf, rel)| ScriptedFrame {
                    inf,
                    rel,
                    response: None,
                })
                .collect(),
            default_response: default_response.into(),
        }
    }

    pub fn validate(&self) -> Result<(), ScorerError> {
        for (i, f) in self.frames.iter().enumerate() {
            ScoreReport::new(f.inf, f.rel).map_err(|_| {
                ScorerError::ProtocolViolation(format!(
                    "script frame {i}: scores out of range (inf={}, rel={})",
                    f.inf, f.rel
                ))
            })?;
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self, ScorerError> {
        let script: Self = serde_json::from_str(json)
            .map_err(|e| ScorerError::ProtocolViolation(format!("bad script: {e}")))?;
        script.validate()?;
        Ok(script)
    }

    pub fn response_for(&self, index: usize) -> &str {
        self.frames
            .get(index)
            .and_then(|f| f.response.as_deref())
            .unwrap_or(&self.default_response)
    }
}

/// Deterministic scorer replaying a [`ScriptedScript`].
///
/// Reports and responses depend only on the frame index, so context
/// contents never influence its outputs. The committed context is still
/// tracked for inspection.
#[derive(Debug, Clone)]
pub struct ScriptedScorer<T> {
    script: ScriptedScript<T>,
    last_frame: Option<usize>,
    context: Vec<ScorerEvent>,
    generate_calls: usize,
}

impl<T: Scalar> ScriptedScorer<T> {
    pub fn new(script: ScriptedScript<T>) -> Result<Self, ScorerError> {
        script.validate()?;
        Ok(Self {
            script,
            last_frame: None,
            context: Vec::new(),
            generate_calls: 0,
        })
    }

    pub fn script(&self) -> &ScriptedScript<T> {
        &self.script
    }

    /// Committed events seen so far, in order.
    pub fn context(&self) -> &[ScorerEvent] {
        &self.context
    }

    pub fn generate_calls(&self) -> usize {
        self.generate_calls
    }
}

impl<T: Scalar> Scorer<T> for ScriptedScorer<T> {
    fn observe(&mut self, event: &ScorerEvent) -> Result<Option<ScoreReport<T>>, ScorerError> {
        let report = match event {
            ScorerEvent::Frame(frame) => {
                let entry = self.script.frames.get(frame.index).ok_or_else(|| {
                    ScorerError::ProtocolViolation(format!(
                        "frame {} is beyond the script ({} frames)",
                        frame.index,
                        self.script.frames.len()
                    ))
                })?;
                self.last_frame = Some(frame.index);
                Some(ScoreReport::new(entry.inf, entry.rel)?)
            }
            ScorerEvent::AssistantText {
                committed: false, ..
            } => return Ok(None),
            _ => None,
        };
        self.context.push(event.clone());
        Ok(report)
    }

    fn generate(&mut self) -> Result<String, ScorerError> {
        let index = self.last_frame.ok_or(ScorerError::NoFrameObserved)?;
        self.generate_calls += 1;
        Ok(self.script.response_for(index).to_owned())
    }
}
