//! The frame-by-frame inference loop.
//!
//! For every frame of the timeline, in order:
//!
//! 1. every pending user turn whose time is at or before the frame
//!    timestamp is sent to the scorer, oldest first;
//! 2. the frame is sent and its scores recorded;
//! 3. the response policy is evaluated;
//! 4. if it fires, a response is generated, recorded at the frame's
//!    timestamp, and sent back to the scorer as assistant text, committed to
//!    the context only when `include_responses_in_context` is set.
//!
//! At most one response is generated per frame. [`SessionState::step`] is
//! the incremental form; [`run_session`] folds it over a whole timeline.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{self, PolicyConfig, PolicyError, ResponsePolicy};
use crate::prompts;
use crate::scorer::{Scorer, ScorerError, ScorerEvent};
use crate::transcript::FrameRef;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("timeline has no frames")]
    EmptyTimeline,
    #[error("frame {got} presented out of order (expected frame {expected})")]
    OutOfOrderFrame { expected: usize, got: usize },
    #[error("frame {index} at {timestamp}s does not advance the clock")]
    NonMonotonicTimestamp { index: usize, timestamp: f64 },
    #[error("invalid session config: {0}")]
    BadConfig(String),
    #[error("user turns are not sorted by time")]
    UnsortedUserTurns,
    #[error("scorer returned no scores for frame {0}")]
    MissingScores(usize),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Sampled frame instants; the engine's clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTimeline {
    pub fps: f64,
    pub frames: Vec<FrameRef>,
}

impl FrameTimeline {
    /// `count` frames at `k / fps`, payload ids produced by `payload`.
    pub fn uniform(count: usize, fps: f64, payload: impl Fn(usize) -> String) -> Self {
        let frames = (0..count)
            .map(|k| FrameRef::new(k, k as f64 / fps, payload(k)))
            .collect();
        Self { fps, frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.timestamp).collect()
    }

    /// Re-times every frame at `index / fps`.
    pub fn retimed(mut self, fps: f64) -> Self {
        self.fps = fps;
        for f in &mut self.frames {
            f.timestamp = f.index as f64 / fps;
        }
        self
    }

    /// Checks fps > 0, dense 0-based indices and increasing timestamps.
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(EngineError::BadConfig(format!("fps must be > 0, got {}", self.fps)));
        }
        let mut last = None;
        for (k, f) in self.frames.iter().enumerate() {
            if f.index != k {
                return Err(EngineError::OutOfOrderFrame {
                    expected: k,
                    got: f.index,
                });
            }
            if last.is_some_and(|t| f.timestamp <= t) || !f.timestamp.is_finite() {
                return Err(EngineError::NonMonotonicTimestamp {
                    index: f.index,
                    timestamp: f.timestamp,
                });
            }
            last = Some(f.timestamp);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedMessage {
    pub time: f64,
    pub text: String,
}

impl TimedMessage {
    pub fn new(time: f64, text: impl Into<String>) -> Self {
        Self {
            time,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig<T> {
    /// Sampling rate the timeline was produced at; must be positive. Frame
    /// timestamps themselves come from the timeline.
    pub fps: f64,
    pub policy: PolicyConfig<T>,
    /// `false` keeps generated responses out of the scorer context.
    pub include_responses_in_context: bool,
    pub system_prompt: String,
    /// Reset the sum accumulator whenever a user turn is delivered.
    pub reset_accumulator_on_user_turn: bool,
}

impl<T: Scalar> SessionConfig<T> {
    pub fn new(fps: f64, policy: PolicyConfig<T>) -> Self {
        Self {
            fps,
            policy,
            include_responses_in_context: true,
            system_prompt: prompts::system_prompt().to_owned(),
            reset_accumulator_on_user_turn: false,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(EngineError::BadConfig(format!("fps must be > 0, got {}", self.fps)));
        }
        if let PolicyConfig::SumThreshold { s } = self.policy {
            PolicyConfig::sum(s)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TraceEntry<T> {
    pub t: f64,
    pub inf: T,
    pub rel: T,
    pub acc: T,
    pub fired: bool,
}

/// Per-frame scores and policy state for every consumed frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent, bound = "T: Scalar")]
pub struct ScoreTrace<T>(pub Vec<TraceEntry<T>>);

impl<T: Scalar> ScoreTrace<T> {
    pub fn entries(&self) -> &[TraceEntry<T>] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn informative(&self) -> Vec<T> {
        self.0.iter().map(|e| e.inf).collect()
    }

    pub fn relevance(&self) -> Vec<T> {
        self.0.iter().map(|e| e.rel).collect()
    }

    pub fn smoothed_relevance(&self, w: usize) -> Vec<T> {
        policy::smooth(&self.relevance(), w)
    }

    pub fn normalized_relevance(&self, w: usize) -> Result<Vec<T>, PolicyError> {
        policy::minmax_normalize(&self.smoothed_relevance(w))
    }

    pub fn fired_times(&self) -> Vec<f64> {
        self.0.iter().filter(|e| e.fired).map(|e| e.t).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SessionResult<T> {
    pub model_turns: Vec<TimedMessage>,
    pub trace: ScoreTrace<T>,
}

impl<T: Scalar> SessionResult<T> {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("session result serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EngineEvent<T> {
    UserDelivered(TimedMessage),
    FrameScored { index: usize, entry: TraceEntry<T> },
    ResponseEmitted(TimedMessage),
}

/// Incremental session: owns the policy state, pending user turns and the
/// accumulated result. The scorer is passed to every step.
#[derive(Debug, Clone)]
pub struct SessionState<T> {
    config: SessionConfig<T>,
    policy: ResponsePolicy<T>,
    pending: VecDeque<TimedMessage>,
    next_index: usize,
    last_timestamp: Option<f64>,
    started: bool,
    model_turns: Vec<TimedMessage>,
    trace: ScoreTrace<T>,
}

impl<T: Scalar> SessionState<T> {
    pub fn new(config: SessionConfig<T>, user_turns: Vec<TimedMessage>) -> Result<Self, EngineError> {
        config.validate()?;
        if user_turns.windows(2).any(|w| w[1].time < w[0].time) {
            return Err(EngineError::UnsortedUserTurns);
        }
        if let Some(bad) = user_turns.iter().find(|m| !(m.time >= 0.0)) {
            return Err(EngineError::BadConfig(format!(
                "user turn time must be >= 0, got {}",
                bad.time
            )));
        }
        Ok(Self {
            policy: ResponsePolicy::new(config.policy),
            config,
            pending: user_turns.into(),
            next_index: 0,
            last_timestamp: None,
            started: false,
            model_turns: Vec::new(),
            trace: ScoreTrace::default(),
        })
    }

    pub fn config(&self) -> &SessionConfig<T> {
        &self.config
    }

    /// Index of the next frame expected by [`SessionState::step`].
    pub fn cursor(&self) -> usize {
        self.next_index
    }

    pub fn pending_user_turns(&self) -> impl Iterator<Item = &TimedMessage> {
        self.pending.iter()
    }

    pub fn model_turns(&self) -> &[TimedMessage] {
        &self.model_turns
    }

    pub fn trace(&self) -> &ScoreTrace<T> {
        &self.trace
    }

    pub fn policy(&self) -> &ResponsePolicy<T> {
        &self.policy
    }

    /// Queues a user turn, keeping the queue time-ordered. Turns with equal
    /// times keep their arrival order.
    pub fn enqueue_user(&mut self, message: TimedMessage) {
        let at = self
            .pending
            .iter()
            .position(|m| m.time > message.time)
            .unwrap_or(self.pending.len());
        self.pending.insert(at, message);
    }

    pub fn set_policy(&mut self, policy: PolicyConfig<T>, reset: bool) -> Result<(), EngineError> {
        if let PolicyConfig::SumThreshold { s } = policy {
            PolicyConfig::sum(s)?;
        }
        self.config.policy = policy;
        self.policy.set_config(policy, reset);
        Ok(())
    }

    pub fn step<S: Scorer<T> + ?Sized>(
        &mut self,
        scorer: &mut S,
        frame: &FrameRef,
    ) -> Result<Vec<EngineEvent<T>>, EngineError> {
        if frame.index != self.next_index {
            return Err(EngineError::OutOfOrderFrame {
                expected: self.next_index,
                got: frame.index,
            });
        }
        if self.last_timestamp.is_some_and(|t| frame.timestamp <= t) {
            return Err(EngineError::NonMonotonicTimestamp {
                index: frame.index,
                timestamp: frame.timestamp,
            });
        }
        if !self.started {
            scorer.observe(&ScorerEvent::SystemText(self.config.system_prompt.clone()))?;
            self.started = true;
        }

        let mut events = Vec::new();
        while self
            .pending
            .front()
            .is_some_and(|m| m.time <= frame.timestamp)
        {
            let message = self.pending.pop_front().expect("front exists");
            scorer.observe(&ScorerEvent::UserText {
                text: message.text.clone(),
                time: message.time,
            })?;
            if self.config.reset_accumulator_on_user_turn {
                self.policy.reset();
            }
            events.push(EngineEvent::UserDelivered(message));
        }

        let report = scorer
            .observe(&ScorerEvent::Frame(frame.clone()))?
            .ok_or(EngineError::MissingScores(frame.index))?;
        let decision = self.policy.evaluate(report.informative(), report.relevance())?;
        let entry = TraceEntry {
            t: frame.timestamp,
            inf: report.informative(),
            rel: report.relevance(),
            acc: decision.acc,
            fired: decision.fired,
        };
        self.trace.0.push(entry);
        self.next_index += 1;
        self.last_timestamp = Some(frame.timestamp);
        events.push(EngineEvent::FrameScored {
            index: frame.index,
            entry,
        });

        if decision.fired {
            let text = scorer.generate()?;
            let response = TimedMessage::new(frame.timestamp, text);
            scorer.observe(&ScorerEvent::AssistantText {
                text: response.text.clone(),
                time: response.time,
                committed: self.config.include_responses_in_context,
            })?;
            self.model_turns.push(response.clone());
            events.push(EngineEvent::ResponseEmitted(response));
        }
        Ok(events)
    }

    pub fn result(&self) -> SessionResult<T> {
        SessionResult {
            model_turns: self.model_turns.clone(),
            trace: self.trace.clone(),
        }
    }

    pub fn finish(self) -> SessionResult<T> {
        SessionResult {
            model_turns: self.model_turns,
            trace: self.trace,
        }
    }
}

pub fn run_session<T: Scalar, S: Scorer<T> + ?Sized>(
    timeline: &FrameTimeline,
    user_turns: Vec<TimedMessage>,
    scorer: &mut S,
    config: SessionConfig<T>,
) -> Result<SessionResult<T>, EngineError> {
    if timeline.is_empty() {
        return Err(EngineError::EmptyTimeline);
    }
    let mut state = SessionState::new(config, user_turns)?;
    for frame in &timeline.frames {
        state.step(scorer, frame)?;
    }
    Ok(state.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::{ScriptedScorer, ScriptedScript};

    fn scorer(inf: &[f64]) -> ScriptedScorer<f64> {
        let scores: Vec<_> = inf.iter().map(|&i| (i, 0.0)).collect();
        ScriptedScorer::new(ScriptedScript::from_scores(&scores, "resp")).unwrap()
    }

    fn sum2() -> SessionConfig<f64> {
        SessionConfig::new(1.0, PolicyConfig::sum(2.0).unwrap())
    }

    #[test]
    fn four_frame_sum_example() {
        let timeline = FrameTimeline::uniform(4, 1.0, |k| format!("f{k}.jpg"));
        let mut s = scorer(&[0.0, 0.0, 1.0, 1.0]);
        let result = run_session(&timeline, vec![], &mut s, sum2()).unwrap();
        assert_eq!(result.model_turns, vec![TimedMessage::new(3.0, "resp")]);
        let acc: Vec<f64> = result.trace.entries().iter().map(|e| e.acc).collect();
        assert_eq!(acc, [0.0, 0.0, 1.0, 0.0]);
        assert_eq!(result.trace.len(), 4);
    }

    #[test]
    fn user_turn_delivered_before_matching_frame() {
        let timeline = FrameTimeline::uniform(6, 2.0, |k| format!("f{k}"));
        let mut state =
            SessionState::new(sum2(), vec![TimedMessage::new(1.5, "q")]).unwrap();
        let mut s = scorer(&[0.0; 6]);
        for frame in &timeline.frames {
            let events = state.step(&mut s, frame).unwrap();
            let delivered = events
                .iter()
                .any(|e| matches!(e, EngineEvent::UserDelivered(_)));
            assert_eq!(delivered, frame.index == 3, "frame {}", frame.index);
        }
    }

    #[test]
    fn zero_scores_never_respond() {
        let timeline = FrameTimeline::uniform(20, 1.0, |k| k.to_string());
        let mut s = scorer(&[0.0; 20]);
        let combo = SessionConfig::new(1.0, PolicyConfig::combined(0.0).unwrap());
        assert!(run_session(&timeline, vec![], &mut s, combo)
            .unwrap()
            .model_turns
            .is_empty());
    }

    #[test]
    fn step_rejects_out_of_order_frames() {
        let mut state = SessionState::new(sum2(), vec![]).unwrap();
        let mut s = scorer(&[0.0; 6]);
        let timeline = FrameTimeline::uniform(6, 1.0, |k| k.to_string());
        for f in &timeline.frames[..4] {
            state.step(&mut s, f).unwrap();
        }
        assert!(matches!(
            state.step(&mut s, &timeline.frames[5]),
            Err(EngineError::OutOfOrderFrame {
                expected: 4,
                got: 5
            })
        ));
    }

    #[test]
    fn fired_step_emits_scored_then_response() {
        let mut state = SessionState::new(sum2(), vec![]).unwrap();
        let mut s = scorer(&[1.0, 1.0]);
        let timeline = FrameTimeline::uniform(2, 1.0, |k| k.to_string());
        state.step(&mut s, &timeline.frames[0]).unwrap();
        let events = state.step(&mut s, &timeline.frames[1]).unwrap();
        assert!(matches!(
            events.as_slice(),
            [
                EngineEvent::FrameScored { index: 1, .. },
                EngineEvent::ResponseEmitted(_)
            ]
        ));
    }

    #[test]
    fn empty_timeline_and_bad_config() {
        let timeline = FrameTimeline {
            fps: 1.0,
            frames: vec![],
        };
        assert!(matches!(
            run_session(&timeline, vec![], &mut scorer(&[]), sum2()),
            Err(EngineError::EmptyTimeline)
        ));
        let mut cfg = sum2();
        cfg.fps = 0.0;
        assert!(matches!(
            SessionState::new(cfg, vec![]),
            Err(EngineError::BadConfig(_))
        ));
        assert!(matches!(
            SessionState::new(
                sum2(),
                vec![TimedMessage::new(2.0, "a"), TimedMessage::new(1.0, "b")]
            ),
            Err(EngineError::UnsortedUserTurns)
        ));
    }

    #[test]
    fn context_mode_controls_commit() {
        let timeline = FrameTimeline::uniform(3, 1.0, |k| k.to_string());
        for include in [true, false] {
            let mut s = scorer(&[1.0, 1.0, 1.0]);
            let mut cfg = sum2();
            cfg.include_responses_in_context = include;
            run_session(&timeline, vec![], &mut s, cfg).unwrap();
            let committed = s
                .context()
                .iter()
                .filter(|e| matches!(e, ScorerEvent::AssistantText { .. }))
                .count();
            assert_eq!(committed, if include { 1 } else { 0 });
        }
    }

    #[test]
    fn accumulator_reset_flag() {
        let timeline = FrameTimeline::uniform(5, 1.0, |k| k.to_string());
        let users = vec![TimedMessage::new(2.0, "q")];
        let mut cfg = sum2();
        let plain = run_session(&timeline, users.clone(), &mut scorer(&[0.9; 5]), cfg.clone())
            .unwrap();
        assert_eq!(plain.trace.fired_times(), [2.0]);
        cfg.reset_accumulator_on_user_turn = true;
        let reset = run_session(&timeline, users, &mut scorer(&[0.9; 5]), cfg).unwrap();
        assert_eq!(reset.trace.fired_times(), [4.0]);
    }

    #[test]
    fn result_json_shape() {
        let timeline = FrameTimeline::uniform(2, 1.0, |k| k.to_string());
        let r = run_session(&timeline, vec![], &mut scorer(&[1.0, 1.0]), sum2()).unwrap();
        assert_eq!(
            r.to_json(),
            r#"{"model_turns":[{"time":1.0,"text":"resp"}],"trace":[{"t":0.0,"inf":1.0,"rel":0.0,"acc":1.0,"fired":false},{"t":1.0,"inf":1.0,"rel":0.0,"acc":0.0,"fired":true}]}"#
        );
    }
}
