//! Duet conversation transcripts and the chat-template text encoding.
//!
//! A transcript is an ordered list of turns among four roles. The `stream`
//! role carries only video frames; the other roles carry text. Rendering
//! produces one canonical byte string per transcript:
//!
//! ```text
//! <im_start>system\nA<im_end><im_start>stream\n<frame><frame><im_end>...
//! ```
//!
//! Turns are concatenated with no separator. Emit times live only in the
//! data model; the rendered template has no timestamps, so `parse` recovers
//! roles, texts and frame counts but not timing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Stream,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::System, Role::User, Role::Assistant, Role::Stream];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Stream => "stream",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown role `{s}`"))
    }
}

/// One sampled frame of a timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    /// 0-based ordinal within its timeline.
    pub index: usize,
    /// Seconds from video start.
    pub timestamp: f64,
    /// Opaque handle to the frame content (file path, feature id, ...).
    pub payload_id: String,
}

impl FrameRef {
    pub fn new(index: usize, timestamp: f64, payload_id: impl Into<String>) -> Self {
        Self {
            index,
            timestamp,
            payload_id: payload_id.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TurnContent {
    Text(String),
    Frames(Vec<FrameRef>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub role: Role,
    pub content: TurnContent,
    /// Seconds from video start at which the turn begins. `None` for the
    /// system prompt and for turns recovered from template text.
    pub emit_time: Option<f64>,
}

impl Turn {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: TurnContent::Text(text.into()),
            emit_time: None,
        }
    }

    pub fn user(text: impl Into<String>, time: f64) -> Self {
        Self {
            role: Role::User,
            content: TurnContent::Text(text.into()),
            emit_time: Some(time),
        }
    }

    pub fn assistant(text: impl Into<String>, time: f64) -> Self {
        Self {
            role: Role::Assistant,
            content: TurnContent::Text(text.into()),
            emit_time: Some(time),
        }
    }

    /// A stream turn; its emit time is the first frame's timestamp.
    pub fn stream(frames: Vec<FrameRef>) -> Self {
        let emit_time = frames.first().map(|f| f.timestamp);
        Self {
            role: Role::Stream,
            content: TurnContent::Frames(frames),
            emit_time,
        }
    }

    pub fn text(&self) -> Option<&str> {
        match &self.content {
            TurnContent::Text(t) => Some(t),
            TurnContent::Frames(_) => None,
        }
    }

    pub fn frames(&self) -> &[FrameRef] {
        match &self.content {
            TurnContent::Frames(f) => f,
            TurnContent::Text(_) => &[],
        }
    }

    pub fn shape(&self) -> TurnShape {
        match &self.content {
            TurnContent::Text(t) => TurnShape::Text(self.role, t.clone()),
            TurnContent::Frames(f) => TurnShape::Frames(f.len()),
        }
    }
}

/// Timing-free view of a turn: what the template text can express.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TurnShape {
    Text(Role, String),
    Frames(usize),
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("turn {index}: `{role}` cannot directly follow another `{role}` turn")]
    RoleAdjacency { index: usize, role: Role },
    #[error("turn {index}: a system turn is only allowed as the first turn")]
    MisplacedSystem { index: usize },
    #[error("turn {index}: time {time} precedes the previous turn time {previous}")]
    TimeRegression {
        index: usize,
        time: f64,
        previous: f64,
    },
    #[error("turn {index}: text turns must be non-empty")]
    EmptyText { index: usize },
    #[error("turn {index}: stream turns must carry at least one frame")]
    EmptyStream { index: usize },
    #[error("turn {index}: text contains the template marker `{marker}`")]
    MarkerInText { index: usize, marker: String },
    #[error("turn {index}: `{role}` turn has the wrong kind of content")]
    ContentMismatch { index: usize, role: Role },
    #[error("turn {index}: frame index {frame_index} does not increase over the previous frame")]
    FrameOrder { index: usize, frame_index: usize },
    #[error("template syntax error at byte {offset}: {reason}")]
    TemplateSyntax { offset: usize, reason: String },
    #[error("transcript json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Markers used to render a transcript as model input text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTemplateSpec {
    pub open: String,
    pub close: String,
    pub frame: String,
}

impl Default for ChatTemplateSpec {
    fn default() -> Self {
        Self {
            open: "<im_start>".to_owned(),
            close: "<im_end>".to_owned(),
            frame: "<frame>".to_owned(),
        }
    }
}

impl ChatTemplateSpec {
    fn markers(&self) -> [&str; 3] {
        [&self.open, &self.close, &self.frame]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DuetTranscript {
    turns: Vec<Turn>,
    /// Latest time seen: last text emit time or last frame timestamp.
    clock: Option<f64>,
    last_frame_index: Option<usize>,
}

impl DuetTranscript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn frame_count(&self) -> usize {
        self.turns.iter().map(|t| t.frames().len()).sum()
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameRef> {
        self.turns.iter().flat_map(|t| t.frames())
    }

    pub fn shapes(&self) -> Vec<TurnShape> {
        self.turns.iter().map(Turn::shape).collect()
    }

    /// Equality up to timing and frame identity.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.shapes() == other.shapes()
    }

    /// Chaining form of [`DuetTranscript::push`].
    pub fn with(mut self, turn: Turn) -> Result<Self, TranscriptError> {
        self.push(turn)?;
        Ok(self)
    }

    /// Appends a turn, enforcing the transcript invariants. Marker checks use
    /// the default template.
    pub fn push(&mut self, turn: Turn) -> Result<(), TranscriptError> {
        self.push_with_template(turn, &ChatTemplateSpec::default())
    }

    pub fn push_with_template(
        &mut self,
        turn: Turn,
        template: &ChatTemplateSpec,
    ) -> Result<(), TranscriptError> {
        let index = self.turns.len();
        let mut clock = self.clock;
        let mut last_frame_index = self.last_frame_index;

        match (&turn.role, &turn.content) {
            (Role::Stream, TurnContent::Frames(frames)) => {
                if frames.is_empty() {
                    return Err(TranscriptError::EmptyStream { index });
                }
                for frame in frames {
                    if last_frame_index.is_some_and(|last| frame.index <= last) {
                        return Err(TranscriptError::FrameOrder {
                            index,
                            frame_index: frame.index,
                        });
                    }
                    check_time(index, frame.timestamp, clock)?;
                    last_frame_index = Some(frame.index);
                    clock = Some(frame.timestamp);
                }
            }
            (Role::Stream, TurnContent::Text(_)) | (_, TurnContent::Frames(_)) => {
                return Err(TranscriptError::ContentMismatch {
                    index,
                    role: turn.role,
                });
            }
            (_, TurnContent::Text(text)) => {
                if text.is_empty() {
                    return Err(TranscriptError::EmptyText { index });
                }
                if let Some(marker) = template.markers().into_iter().find(|m| text.contains(m)) {
                    return Err(TranscriptError::MarkerInText {
                        index,
                        marker: marker.to_owned(),
                    });
                }
                if let Some(t) = turn.emit_time {
                    check_time(index, t, clock)?;
                    clock = Some(t);
                }
            }
        }

        if turn.role == Role::System && index != 0 {
            return Err(TranscriptError::MisplacedSystem { index });
        }
        if let Some(prev) = self.turns.last() {
            if prev.role == turn.role {
                return Err(TranscriptError::RoleAdjacency {
                    index,
                    role: turn.role,
                });
            }
        }

        self.clock = clock;
        self.last_frame_index = last_frame_index;
        self.turns.push(turn);
        Ok(())
    }

    /// Adds a frame to the trailing stream turn, opening a new one if the
    /// last turn is not a stream turn.
    pub fn push_frame(&mut self, frame: FrameRef) -> Result<(), TranscriptError> {
        let extends = matches!(self.turns.last(), Some(t) if t.role == Role::Stream);
        if !extends {
            return self.push(Turn::stream(vec![frame]));
        }
        let index = self.turns.len() - 1;
        if self.last_frame_index.is_some_and(|last| frame.index <= last) {
            return Err(TranscriptError::FrameOrder {
                index,
                frame_index: frame.index,
            });
        }
        check_time(index, frame.timestamp, self.clock)?;
        self.clock = Some(frame.timestamp);
        self.last_frame_index = Some(frame.index);
        if let Some(TurnContent::Frames(frames)) = self.turns.last_mut().map(|t| &mut t.content) {
            frames.push(frame);
        }
        Ok(())
    }

    pub fn render(&self, template: &ChatTemplateSpec) -> String {
        let mut out = String::new();
        for turn in &self.turns {
            out.push_str(&template.open);
            out.push_str(turn.role.as_str());
            out.push('\n');
            match &turn.content {
                TurnContent::Text(text) => out.push_str(text),
                TurnContent::Frames(frames) => {
                    for _ in frames {
                        out.push_str(&template.frame);
                    }
                }
            }
            out.push_str(&template.close);
        }
        out
    }

    /// Parses template text back into a transcript.
    ///
    /// The text carries no timing, so recovered turns have no emit time and
    /// recovered frames are numbered on a nominal 1 fps clock with an empty
    /// payload id.
    pub fn parse(text: &str, template: &ChatTemplateSpec) -> Result<Self, TranscriptError> {
        let mut transcript = DuetTranscript::new();
        let mut pos = 0;
        let mut next_frame = 0usize;

        while pos < text.len() {
            let rest = &text[pos..];
            if !rest.starts_with(template.open.as_str()) {
                return Err(syntax(pos, format!("expected `{}`", template.open)));
            }
            let role_start = pos + template.open.len();
            let newline = text[role_start..]
                .find('\n')
                .ok_or_else(|| syntax(role_start, "missing newline after role name"))?;
            let role_name = &text[role_start..role_start + newline];
            let role: Role = role_name
                .parse()
                .map_err(|reason: String| syntax(role_start, reason))?;
            let body_start = role_start + newline + 1;
            let body_len = text[body_start..]
                .find(template.close.as_str())
                .ok_or_else(|| syntax(text.len(), format!("unclosed `{role}` turn")))?;
            let body = &text[body_start..body_start + body_len];

            let content = if role == Role::Stream {
                let mut frames = Vec::new();
                let mut offset = 0;
                while offset < body.len() {
                    if !body[offset..].starts_with(template.frame.as_str()) {
                        return Err(syntax(
                            body_start + offset,
                            "stream turns may only contain frame placeholders",
                        ));
                    }
                    frames.push(FrameRef::new(next_frame, next_frame as f64, ""));
                    next_frame += 1;
                    offset += template.frame.len();
                }
                TurnContent::Frames(frames)
            } else {
                TurnContent::Text(body.to_owned())
            };
            let turn = Turn {
                role,
                content,
                emit_time: None,
            };
            transcript.push_with_template(turn, template)?;
            pos = body_start + body_len + template.close.len();
        }
        Ok(transcript)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&TranscriptFile::from(self)).expect("transcript serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, TranscriptError> {
        let file: TranscriptFile = serde_json::from_str(json)?;
        file.try_into()
    }
}

fn check_time(index: usize, time: f64, clock: Option<f64>) -> Result<(), TranscriptError> {
    match clock {
        Some(previous) if time < previous => Err(TranscriptError::TimeRegression {
            index,
            time,
            previous,
        }),
        _ => Ok(()),
    }
}

fn syntax(offset: usize, reason: impl Into<String>) -> TranscriptError {
    TranscriptError::TemplateSyntax {
        offset,
        reason: reason.into(),
    }
}

/// On-disk form: `{"turns":[{"role":..,"text":..}|{"role":"stream","frames":[..]}]}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct TranscriptFile {
    pub turns: Vec<TurnRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TurnRecord {
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<FrameRef>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
}

impl From<&DuetTranscript> for TranscriptFile {
    fn from(t: &DuetTranscript) -> Self {
        let turns = t
            .turns
            .iter()
            .map(|turn| match &turn.content {
                TurnContent::Text(text) => TurnRecord {
                    role: turn.role,
                    text: Some(text.clone()),
                    frames: None,
                    time: turn.emit_time,
                },
                TurnContent::Frames(frames) => TurnRecord {
                    role: turn.role,
                    text: None,
                    frames: Some(frames.clone()),
                    time: None,
                },
            })
            .collect();
        TranscriptFile { turns }
    }
}

impl TryFrom<TranscriptFile> for DuetTranscript {
    type Error = TranscriptError;

    fn try_from(file: TranscriptFile) -> Result<Self, Self::Error> {
        let mut transcript = DuetTranscript::new();
        for (index, record) in file.turns.into_iter().enumerate() {
            let content = match (record.text, record.frames) {
                (Some(text), None) => TurnContent::Text(text),
                (None, Some(frames)) => TurnContent::Frames(frames),
                _ => {
                    return Err(TranscriptError::ContentMismatch {
                        index,
                        role: record.role,
                    })
                }
            };
            let emit_time = match &content {
                TurnContent::Frames(frames) => frames.first().map(|f| f.timestamp),
                TurnContent::Text(_) => record.time,
            };
            transcript.push(Turn {
                role: record.role,
                content,
                emit_time,
            })?;
        }
        Ok(transcript)
    }
}

impl Serialize for DuetTranscript {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        TranscriptFile::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DuetTranscript {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let file = TranscriptFile::deserialize(deserializer)?;
        file.try_into().map_err(serde::de::Error::custom)
    }
}
