//! One interactive session: engine state, scorer, status and event log.
//!
//! Everything here is synchronous; the HTTP layer serializes calls through a
//! per-session command queue.

use std::sync::{Arc, Mutex, MutexGuard};

use duet_core::engine::{EngineEvent, FrameTimeline, SessionConfig, SessionState, TimedMessage};
use duet_core::policy::PolicyConfig;
use duet_core::scorer::Scorer;
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;

use crate::error::ServiceError;

pub type BoxedScorer = Box<dyn Scorer<f64> + Send>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Created,
    Playing,
    Paused,
    Finished,
}

/// Pushed to the event stream, in engine order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServiceEvent {
    FrameScored {
        index: usize,
        t: f64,
        inf: f64,
        rel: f64,
        acc: f64,
        fired: bool,
    },
    Response {
        t: f64,
        text: String,
    },
    /// A user message reached the scorer, just before the frame at `t`.
    UserAck {
        t: f64,
        text: String,
    },
    Finished {
        frames: usize,
        responses: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
}

impl ServiceEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::FrameScored { .. } => "frame_scored",
            Self::Response { .. } => "response",
            Self::UserAck { .. } => "user_ack",
            Self::Finished { .. } => "finished",
        }
    }
}

impl From<EngineEvent<f64>> for ServiceEvent {
    fn from(event: EngineEvent<f64>) -> Self {
        match event {
            EngineEvent::UserDelivered(m) => Self::UserAck { t: m.time, text: m.text },
            EngineEvent::FrameScored { index, entry } => Self::FrameScored {
                index,
                t: entry.t,
                inf: entry.inf,
                rel: entry.rel,
                acc: entry.acc,
                fired: entry.fired,
            },
            EngineEvent::ResponseEmitted(m) => Self::Response { t: m.time, text: m.text },
        }
    }
}

#[derive(Debug, Default)]
struct LogInner {
    events: Vec<ServiceEvent>,
    delivered: usize,
    generation: u64,
}

/// Append-only event log shared with at most one stream subscriber.
///
/// `delivered` counts events handed to a subscriber; a new subscriber
/// replaces the current one and resumes from there.
#[derive(Debug, Default)]
pub struct EventLog {
    inner: Mutex<LogInner>,
    notify: Notify,
}

/// What a subscriber should do next.
#[derive(Debug)]
pub enum Next {
    Event(u64, ServiceEvent),
    Wait,
    Done,
}

impl EventLog {
    fn lock(&self) -> MutexGuard<'_, LogInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn push(&self, events: impl IntoIterator<Item = ServiceEvent>) {
        self.lock().events.extend(events);
        self.notify.notify_waiters();
    }

    pub fn snapshot(&self) -> Vec<ServiceEvent> {
        self.lock().events.clone()
    }

    pub fn len(&self) -> usize {
        self.lock().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a new subscriber and returns its generation.
    pub fn subscribe(&self) -> u64 {
        let generation = {
            let mut inner = self.lock();
            inner.generation += 1;
            inner.generation
        };
        self.notify.notify_waiters();
        generation
    }

    /// Takes the next undelivered event for subscriber `generation`.
    pub fn next(&self, generation: u64) -> Next {
        let mut inner = self.lock();
        if inner.generation != generation {
            return Next::Done;
        }
        match inner.events.get(inner.delivered).cloned() {
            Some(event) => {
                inner.delivered += 1;
                Next::Event(inner.delivered as u64 - 1, event)
            }
            None if matches!(inner.events.last(), Some(ServiceEvent::Finished { .. })) => Next::Done,
            None => Next::Wait,
        }
    }

    /// Waits until the log changes or a subscriber arrives.
    pub async fn changed(&self, generation: u64) -> Next {
        loop {
            let notified = self.notify.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            match self.next(generation) {
                Next::Wait => notified.await,
                other => return other,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub status: Status,
    pub cursor: usize,
    pub frame_count: usize,
    pub fps: f64,
    pub policy: String,
    pub accumulator: f64,
    pub rate: Option<f64>,
    pub events: usize,
}

pub struct SessionCore {
    id: String,
    timeline: FrameTimeline,
    state: SessionState<f64>,
    /// Dropped when the session finishes, closing any external connection.
    scorer: Option<BoxedScorer>,
    status: Status,
    rate: Option<f64>,
    log: Arc<EventLog>,
}

impl SessionCore {
    pub fn new(
        id: String,
        timeline: FrameTimeline,
        user_turns: Vec<TimedMessage>,
        config: SessionConfig<f64>,
        scorer: BoxedScorer,
    ) -> Result<Self, ServiceError> {
        if timeline.is_empty() {
            return Err(ServiceError::BadConfig("timeline has no frames".into()));
        }
        timeline.validate().map_err(|e| ServiceError::BadConfig(e.to_string()))?;
        let state = SessionState::new(config, user_turns).map_err(|e| ServiceError::BadConfig(e.to_string()))?;
        Ok(Self {
            id,
            timeline,
            state,
            scorer: Some(scorer),
            status: Status::Created,
            rate: None,
            log: Arc::default(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn rate(&self) -> Option<f64> {
        self.rate
    }

    pub fn fps(&self) -> f64 {
        self.timeline.fps
    }

    pub fn log(&self) -> Arc<EventLog> {
        Arc::clone(&self.log)
    }

    pub fn info(&self) -> SessionInfo {
        SessionInfo {
            id: self.id.clone(),
            status: self.status,
            cursor: self.state.cursor(),
            frame_count: self.timeline.len(),
            fps: self.timeline.fps,
            policy: self.state.config().policy.to_string(),
            accumulator: self.state.policy().accumulator(),
            rate: self.rate,
            events: self.log.len(),
        }
    }

    fn ensure_live(&self) -> Result<(), ServiceError> {
        if self.status == Status::Finished {
            Err(ServiceError::SessionFinished(self.id.clone()))
        } else {
            Ok(())
        }
    }

    /// Scores up to `n` more frames. Reaching the end of the timeline
    /// finishes the session and appends a `finished` event.
    pub fn advance(&mut self, n: usize) -> Result<Vec<ServiceEvent>, ServiceError> {
        self.ensure_live()?;
        let mut out = Vec::new();
        for _ in 0..n {
            let Some(frame) = self.timeline.frames.get(self.state.cursor()) else {
                break;
            };
            let scorer = self.scorer.as_mut().expect("live session has a scorer");
            match self.state.step(scorer, frame) {
                Ok(events) => out.extend(events.into_iter().map(ServiceEvent::from)),
                Err(e) => {
                    out.push(self.finish(Some(e.to_string())));
                    self.log.push(out.iter().cloned());
                    return Err(ServiceError::Engine(e.to_string()));
                }
            }
        }
        if self.state.cursor() >= self.timeline.len() {
            out.push(self.finish(None));
        }
        self.log.push(out.iter().cloned());
        Ok(out)
    }

    fn finish(&mut self, error: Option<String>) -> ServiceEvent {
        self.status = Status::Finished;
        self.rate = None;
        self.scorer = None;
        ServiceEvent::Finished {
            frames: self.state.cursor(),
            responses: self.state.model_turns().len(),
            error,
        }
    }

    /// Queues a live message at the timestamp of the next unscored frame and
    /// returns that time.
    pub fn post_message(&mut self, text: String) -> Result<f64, ServiceError> {
        self.ensure_live()?;
        if text.is_empty() {
            return Err(ServiceError::BadConfig("empty message".into()));
        }
        let time = self
            .timeline
            .frames
            .get(self.state.cursor())
            .map(|f| f.timestamp)
            .ok_or_else(|| ServiceError::SessionFinished(self.id.clone()))?;
        self.state.enqueue_user(TimedMessage::new(time, text));
        Ok(time)
    }

    /// Swaps the policy for the remaining frames. Returns whether anything
    /// changed.
    pub fn update_policy(&mut self, policy: PolicyConfig<f64>, reset: bool) -> Result<bool, ServiceError> {
        let current = self.state.config().policy;
        if current == policy && !reset {
            return Ok(false);
        }
        self.state
            .set_policy(policy, reset)
            .map_err(|e| ServiceError::BadConfig(e.to_string()))?;
        Ok(true)
    }

    pub fn play(&mut self, rate: f64) -> Result<(), ServiceError> {
        self.ensure_live()?;
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(ServiceError::BadConfig(format!("rate must be > 0, got {rate}")));
        }
        self.status = Status::Playing;
        self.rate = Some(rate);
        Ok(())
    }

    pub fn pause(&mut self) -> Result<(), ServiceError> {
        self.ensure_live()?;
        if self.status == Status::Created {
            return Err(ServiceError::InvalidTransition {
                from: Status::Created,
                to: Status::Paused,
            });
        }
        self.status = Status::Paused;
        self.rate = None;
        Ok(())
    }
}
