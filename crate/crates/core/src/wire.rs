//! Newline-delimited JSON protocol between the engine and an external model
//! process (child process stdio or a TCP connection).
//!
//! Requests, one JSON object per line:
//!
//! ```text
//! {"type":"system","text":..}
//! {"type":"user","text":..,"time":..}
//! {"type":"frame","index":..,"timestamp":..,"payload_id":..}
//! {"type":"generate"}
//! {"type":"commit","text":..,"time":..,"commit":true|false}
//! ```
//!
//! Replies: `{"inf":..,"rel":..}` to `frame`, `{"text":..}` to `generate`,
//! `{"ok":true}` to everything else. A reply `{"error":..}` is reported as a
//! protocol violation.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::scorer::{ScoreReport, Scorer, ScorerError, ScorerEvent};
use crate::transcript::FrameRef;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Request {
    System {
        text: String,
    },
    User {
        text: String,
        time: f64,
    },
    Frame {
        index: usize,
        timestamp: f64,
        payload_id: String,
    },
    Generate,
    Commit {
        text: String,
        time: f64,
        commit: bool,
    },
}

impl From<&ScorerEvent> for Request {
    fn from(event: &ScorerEvent) -> Self {
        match event {
            ScorerEvent::SystemText(text) => Request::System { text: text.clone() },
            ScorerEvent::UserText { text, time } => Request::User {
                text: text.clone(),
                time: *time,
            },
            ScorerEvent::Frame(f) => Request::Frame {
                index: f.index,
                timestamp: f.timestamp,
                payload_id: f.payload_id.clone(),
            },
            ScorerEvent::AssistantText {
                text,
                time,
                committed,
            } => Request::Commit {
                text: text.clone(),
                time: *time,
                commit: *committed,
            },
        }
    }
}

impl Request {
    /// The scorer event this request carries; `None` for `generate`.
    pub fn to_event(&self) -> Option<ScorerEvent> {
        Some(match self {
            Request::System { text } => ScorerEvent::SystemText(text.clone()),
            Request::User { text, time } => ScorerEvent::UserText {
                text: text.clone(),
                time: *time,
            },
            Request::Frame {
                index,
                timestamp,
                payload_id,
            } => ScorerEvent::Frame(FrameRef::new(*index, *timestamp, payload_id.clone())),
            Request::Commit { text, time, commit } => ScorerEvent::AssistantText {
                text: text.clone(),
                time: *time,
                committed: *commit,
            },
            Request::Generate => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reply<T> {
    Scores(ScoreReport<T>),
    Text(String),
    Ok,
}

fn violation(msg: impl Into<String>) -> ScorerError {
    ScorerError::ProtocolViolation(msg.into())
}

fn to_line(value: &impl Serialize) -> Vec<u8> {
    let mut bytes = serde_json::to_vec(value).expect("wire messages serialize");
    bytes.push(b'\n');
    bytes
}

pub fn encode_request(request: &Request) -> Vec<u8> {
    to_line(request)
}

pub fn decode_request(line: &[u8]) -> Result<Request, ScorerError> {
    serde_json::from_slice(trim_newline(line)).map_err(|e| violation(format!("bad request: {e}")))
}

pub fn encode_reply<T: Scalar>(reply: &Reply<T>) -> Vec<u8> {
    match reply {
        Reply::Scores(r) => to_line(&serde_json::json!({
            "inf": r.informative(),
            "rel": r.relevance(),
        })),
        Reply::Text(text) => to_line(&serde_json::json!({ "text": text })),
        Reply::Ok => to_line(&serde_json::json!({ "ok": true })),
    }
}

pub fn decode_reply<T: Scalar>(line: &[u8]) -> Result<Reply<T>, ScorerError> {
    let value: Value = serde_json::from_slice(trim_newline(line))
        .map_err(|e| violation(format!("malformed reply line: {e}")))?;
    let Value::Object(obj) = value else {
        return Err(violation("reply is not a JSON object"));
    };
    if let Some(err) = obj.get("error") {
        return Err(violation(format!("scorer reported error: {err}")));
    }
    if obj.contains_key("inf") || obj.contains_key("rel") {
        let inf = score_field::<T>(&obj, "inf")?;
        let rel = score_field::<T>(&obj, "rel")?;
        return ScoreReport::new(inf, rel).map(Reply::Scores);
    }
    if let Some(text) = obj.get("text") {
        return text
            .as_str()
            .map(|t| Reply::Text(t.to_owned()))
            .ok_or_else(|| violation("`text` must be a string"));
    }
    match obj.get("ok") {
        Some(Value::Bool(true)) => Ok(Reply::Ok),
        _ => Err(violation(format!("unrecognized reply {}", Value::Object(obj)))),
    }
}

fn score_field<T: Scalar>(obj: &Map<String, Value>, key: &str) -> Result<T, ScorerError> {
    obj.get(key)
        .and_then(Value::as_f64)
        .and_then(T::from_f64)
        .ok_or_else(|| violation(format!("reply lacks numeric `{key}`")))
}

fn trim_newline(line: &[u8]) -> &[u8] {
    let line = line.strip_suffix(b"\n").unwrap_or(line);
    line.strip_suffix(b"\r").unwrap_or(line)
}

/// Client side of the protocol over any line-oriented byte stream.
pub struct ExternalScorer<R, W> {
    reader: R,
    writer: W,
    frame_seen: bool,
    child: Option<Child>,
}

impl<R: BufRead, W: Write> ExternalScorer<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self {
            reader,
            writer,
            frame_seen: false,
            child: None,
        }
    }

    pub fn writer(&self) -> &W {
        &self.writer
    }

    fn call<T: Scalar>(&mut self, request: &Request) -> Result<Reply<T>, ScorerError> {
        let unavailable = |e: std::io::Error| ScorerError::Unavailable(e.to_string());
        self.writer
            .write_all(&encode_request(request))
            .map_err(unavailable)?;
        self.writer.flush().map_err(unavailable)?;
        let mut line = Vec::new();
        let n = self.reader.read_until(b'\n', &mut line).map_err(unavailable)?;
        if n == 0 {
            return Err(ScorerError::Unavailable(
                "scorer closed the connection".into(),
            ));
        }
        decode_reply(&line)
    }
}

impl ExternalScorer<BufReader<ChildStdout>, ChildStdin> {
    /// Spawns `argv` and talks to it over its stdin/stdout.
    pub fn spawn<S: AsRef<std::ffi::OsStr>>(argv: &[S]) -> Result<Self, ScorerError> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| ScorerError::Unavailable("empty scorer command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ScorerError::Unavailable(format!("cannot spawn scorer: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut scorer = Self::new(BufReader::new(stdout), stdin);
        scorer.child = Some(child);
        Ok(scorer)
    }
}

impl ExternalScorer<BufReader<TcpStream>, TcpStream> {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ScorerError> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| ScorerError::Unavailable(format!("cannot connect to scorer: {e}")))?;
        let reader = stream
            .try_clone()
            .map_err(|e| ScorerError::Unavailable(e.to_string()))?;
        Ok(Self::new(BufReader::new(reader), stream))
    }
}

impl<R, W> Drop for ExternalScorer<R, W> {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl<T: Scalar, R: BufRead, W: Write> Scorer<T> for ExternalScorer<R, W> {
    fn observe(&mut self, event: &ScorerEvent) -> Result<Option<ScoreReport<T>>, ScorerError> {
        let is_frame = matches!(event, ScorerEvent::Frame(_));
        match (self.call::<T>(&Request::from(event))?, is_frame) {
            (Reply::Scores(report), true) => {
                self.frame_seen = true;
                Ok(Some(report))
            }
            (Reply::Ok, false) => Ok(None),
            (other, _) => Err(violation(format!("unexpected reply {other:?}"))),
        }
    }

    fn generate(&mut self) -> Result<String, ScorerError> {
        if !self.frame_seen {
            return Err(ScorerError::NoFrameObserved);
        }
        match self.call::<T>(&Request::Generate)? {
            Reply::Text(text) => Ok(text),
            other => Err(violation(format!("unexpected reply to generate: {other:?}"))),
        }
    }
}

/// Server side: answers protocol requests from `reader` using `scorer` until
/// end of input. Scorer failures are sent back as `{"error":..}` lines.
pub fn serve<T: Scalar, S: Scorer<T>>(
    scorer: &mut S,
    reader: impl BufRead,
    mut writer: impl Write,
) -> std::io::Result<()> {
    for line in reader.split(b'\n') {
        let line = line?;
        if trim_newline(&line).is_empty() {
            continue;
        }
        let reply: Result<Reply<T>, ScorerError> = decode_request(&line).and_then(|req| match req {
            Request::Generate => scorer.generate().map(Reply::Text),
            other => {
                let event = other.to_event().expect("non-generate request");
                scorer
                    .observe(&event)
                    .map(|r| r.map_or(Reply::Ok, Reply::Scores))
            }
        });
        let bytes = match reply {
            Ok(reply) => encode_reply(&reply),
            Err(e) => to_line(&serde_json::json!({ "error": e.to_string() })),
        };
        writer.write_all(&bytes)?;
        writer.flush()?;
    }
    Ok(())
}
