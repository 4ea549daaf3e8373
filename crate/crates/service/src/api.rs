//! HTTP routes and the per-session command queue.

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use duet_core::engine::{FrameTimeline, SessionConfig, TimedMessage};
use duet_core::policy::PolicyConfig;
use duet_core::scenario::{ScenarioGold, ScenarioInfo, ScenarioLibrary};
use duet_core::scorer::{ScriptedScorer, ScriptedScript};
use duet_core::wire::ExternalScorer;
use futures::Stream;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{mpsc, oneshot};
use tokio::time::Instant;

use crate::error::ServiceError;
use crate::session::{BoxedScorer, EventLog, Next, ServiceEvent, SessionCore, SessionInfo, Status};

/// Where sessions without a script get their scores.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScorerBackend {
    Command(Vec<String>),
    Address(String),
}

impl ScorerBackend {
    fn connect(&self) -> Result<BoxedScorer, ServiceError> {
        let scorer: BoxedScorer = match self {
            Self::Command(argv) => Box::new(ExternalScorer::spawn(argv).map_err(|e| ServiceError::Scorer(e.to_string()))?),
            Self::Address(addr) => {
                Box::new(ExternalScorer::connect(addr.as_str()).map_err(|e| ServiceError::Scorer(e.to_string()))?)
            }
        };
        Ok(scorer)
    }
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Shared>,
}

struct Shared {
    scenarios: ScenarioLibrary<f64>,
    default_scorer: Option<ScorerBackend>,
    frames_dir: Option<PathBuf>,
    sessions: RwLock<HashMap<String, SessionHandle>>,
    next_id: AtomicU64,
}

#[derive(Clone)]
struct SessionHandle {
    commands: mpsc::Sender<Command>,
    log: Arc<EventLog>,
}

impl AppState {
    pub fn new(scenarios: ScenarioLibrary<f64>) -> Self {
        Self::with_options(scenarios, None, None)
    }

    /// `frames_dir` is served under `/frames/`; usually the scenario directory.
    pub fn with_options(
        scenarios: ScenarioLibrary<f64>,
        default_scorer: Option<ScorerBackend>,
        frames_dir: Option<PathBuf>,
    ) -> Self {
        Self {
            inner: Arc::new(Shared {
                scenarios,
                default_scorer,
                frames_dir,
                sessions: RwLock::default(),
                next_id: AtomicU64::new(1),
            }),
        }
    }

    fn session(&self, id: &str) -> Result<SessionHandle, ServiceError> {
        let sessions = self.inner.sessions.read().unwrap_or_else(|e| e.into_inner());
        sessions
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.to_owned()))
    }

    fn fresh_id(&self) -> String {
        let n = self.inner.next_id.fetch_add(1, Ordering::Relaxed);
        format!("s{n:06x}")
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/scenarios", get(list_scenarios))
        .route("/scenarios/{id}", get(scenario_detail))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info))
        .route("/sessions/{id}/advance", post(advance))
        .route("/sessions/{id}/message", post(post_message))
        .route("/sessions/{id}/policy", post(update_policy))
        .route("/sessions/{id}/play", post(play))
        .route("/sessions/{id}/pause", post(pause))
        .route("/sessions/{id}/events", get(events))
        .route("/frames/{*path}", get(frame_file))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

// ---- commands ----

type Reply<T> = oneshot::Sender<Result<T, ServiceError>>;

enum Command {
    Advance(usize, Reply<AdvanceReply>),
    Message(String, Reply<f64>),
    Policy(PolicyConfig<f64>, bool, Reply<PolicyReply>),
    Play(f64, Reply<SessionInfo>),
    Pause(Reply<SessionInfo>),
    Info(Reply<SessionInfo>),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AdvanceReply {
    pub events: Vec<ServiceEvent>,
    pub session: SessionInfo,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PolicyReply {
    pub changed: bool,
    pub policy: String,
}

/// Runs `f` on the session off the async runtime; scorer calls may block.
async fn blocking<R: Send + 'static>(
    slot: &mut Option<SessionCore>,
    f: impl FnOnce(&mut SessionCore) -> R + Send + 'static,
) -> R {
    let mut core = slot.take().expect("session present between commands");
    let (core, out) = tokio::task::spawn_blocking(move || {
        let out = f(&mut core);
        (core, out)
    })
    .await
    .unwrap_or_else(|e| std::panic::resume_unwind(e.into_panic()));
    *slot = Some(core);
    out
}

/// The session's event loop: commands in arrival order, plus one frame per
/// tick while playing.
async fn run_session_loop(core: SessionCore, mut commands: mpsc::Receiver<Command>) {
    let mut slot = Some(core);
    let mut next_tick: Option<Instant> = None;
    loop {
        let tick = async {
            match next_tick {
                Some(at) => tokio::time::sleep_until(at).await,
                None => std::future::pending().await,
            }
        };
        tokio::select! {
            command = commands.recv() => {
                let Some(command) = command else { break };
                handle(&mut slot, command, &mut next_tick).await;
            }
            () = tick => {
                // Errors already end the session with a `finished` event.
                let _ = blocking(&mut slot, |core| core.advance(1)).await;
                let core = slot.as_ref().expect("session present");
                next_tick = match (core.status(), core.rate(), next_tick) {
                    (Status::Playing, Some(rate), Some(at)) => Some(at + frame_period(core.fps(), rate)),
                    _ => None,
                };
            }
        }
    }
}

fn frame_period(fps: f64, rate: f64) -> Duration {
    Duration::from_secs_f64(1.0 / (fps * rate))
}

async fn handle(slot: &mut Option<SessionCore>, command: Command, next_tick: &mut Option<Instant>) {
    match command {
        Command::Advance(n, reply) => {
            let out = blocking(slot, move |core| {
                core.advance(n).map(|events| AdvanceReply {
                    events,
                    session: core.info(),
                })
            })
            .await;
            if slot.as_ref().is_some_and(|c| c.status() == Status::Finished) {
                *next_tick = None;
            }
            let _ = reply.send(out);
        }
        Command::Message(text, reply) => {
            let core = slot.as_mut().expect("session present");
            let _ = reply.send(core.post_message(text));
        }
        Command::Policy(policy, reset, reply) => {
            let core = slot.as_mut().expect("session present");
            let out = core.update_policy(policy, reset).map(|changed| PolicyReply {
                changed,
                policy: core.info().policy,
            });
            let _ = reply.send(out);
        }
        Command::Play(rate, reply) => {
            let core = slot.as_mut().expect("session present");
            let was_playing = core.status() == Status::Playing;
            let out = core.play(rate).map(|()| core.info());
            if out.is_ok() {
                let period = frame_period(core.fps(), rate);
                *next_tick = match *next_tick {
                    Some(at) if was_playing => Some(at.min(Instant::now() + period)),
                    _ => Some(Instant::now() + period),
                };
            }
            let _ = reply.send(out);
        }
        Command::Pause(reply) => {
            let core = slot.as_mut().expect("session present");
            let out = core.pause().map(|()| core.info());
            if out.is_ok() {
                *next_tick = None;
            }
            let _ = reply.send(out);
        }
        Command::Info(reply) => {
            let _ = reply.send(Ok(slot.as_ref().expect("session present").info()));
        }
    }
}

impl SessionHandle {
    async fn call<T>(&self, id: &str, command: impl FnOnce(Reply<T>) -> Command) -> Result<T, ServiceError> {
        let (tx, rx) = oneshot::channel();
        self.commands
            .send(command(tx))
            .await
            .map_err(|_| ServiceError::Closed(id.to_owned()))?;
        rx.await.map_err(|_| ServiceError::Closed(id.to_owned()))?
    }
}

// ---- request bodies ----

fn parse_body<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ServiceError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ServiceError::BadConfig(format!("request body: {e}")))
}

fn parse_policy(spec: &str) -> Result<PolicyConfig<f64>, ServiceError> {
    spec.parse().map_err(|e| ServiceError::BadConfig(format!("policy `{spec}`: {e}")))
}

/// `POST /sessions`. Either `scenario` or an uploaded `timeline` is
/// required; the other fields override the scenario's settings.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub scenario: Option<String>,
    pub timeline: Option<FrameTimeline>,
    pub script: Option<ScriptedScript<f64>>,
    pub user_turns: Option<Vec<TimedMessage>>,
    pub policy: Option<String>,
    pub fps: Option<f64>,
    pub include_responses_in_context: Option<bool>,
    pub reset_accumulator_on_user_turn: Option<bool>,
    pub scorer_cmd: Option<Vec<String>>,
    pub scorer_addr: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct AdvanceBody {
    frames: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
struct MessageBody {
    text: String,
}

#[derive(Debug, Default, Deserialize)]
struct PolicyBody {
    policy: String,
    #[serde(default)]
    reset: bool,
}

#[derive(Debug, Default, Deserialize)]
struct PlayBody {
    rate: Option<f64>,
}

enum ScorerSource {
    Script(ScriptedScript<f64>),
    Backend(ScorerBackend),
}

// ---- handlers ----

async fn list_scenarios(State(state): State<AppState>) -> Json<Vec<ScenarioInfo>> {
    Json(state.inner.scenarios.list())
}

#[derive(Serialize)]
struct ScenarioDetail<'a> {
    #[serde(flatten)]
    info: ScenarioInfo,
    timeline: FrameTimeline,
    user_turns: &'a [TimedMessage],
    gold: &'a ScenarioGold,
}

async fn scenario_detail(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<impl IntoResponse, ServiceError> {
    let scenario = state
        .inner
        .scenarios
        .get(&id)
        .map_err(|_| ServiceError::UnknownScenario(id.clone()))?;
    let detail = ScenarioDetail {
        info: scenario.info(),
        timeline: scenario.timeline(),
        user_turns: &scenario.user_turns,
        gold: &scenario.gold,
    };
    Ok(Json(serde_json::to_value(detail).expect("scenario serializes")))
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ServiceError> {
    let req: CreateSession = parse_body(&body)?;
    let scenario = match &req.scenario {
        Some(id) => Some(
            state
                .inner
                .scenarios
                .get(id)
                .map_err(|_| ServiceError::UnknownScenario(id.clone()))?,
        ),
        None => None,
    };
    let mut timeline = match (req.timeline, scenario) {
        (Some(t), _) => t,
        (None, Some(s)) => s.timeline(),
        (None, None) => return Err(ServiceError::BadConfig("need `scenario` or `timeline`".into())),
    };
    if let Some(fps) = req.fps {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(ServiceError::BadConfig(format!("fps must be > 0, got {fps}")));
        }
        timeline = timeline.retimed(fps);
    }
    let policy = match (&req.policy, scenario) {
        (Some(spec), _) => parse_policy(spec)?,
        (None, Some(s)) => s.policy,
        (None, None) => return Err(ServiceError::BadConfig("need `policy`".into())),
    };
    let user_turns = req
        .user_turns
        .or_else(|| scenario.map(|s| s.user_turns.clone()))
        .unwrap_or_default();
    let mut config = SessionConfig::new(timeline.fps, policy);
    config.include_responses_in_context = req
        .include_responses_in_context
        .or_else(|| scenario.map(|s| s.include_responses_in_context))
        .unwrap_or(true);
    config.reset_accumulator_on_user_turn = req.reset_accumulator_on_user_turn.unwrap_or(false);

    let source = match (req.scorer_cmd, req.scorer_addr, req.script) {
        (Some(argv), _, _) => ScorerSource::Backend(ScorerBackend::Command(argv)),
        (None, Some(addr), _) => ScorerSource::Backend(ScorerBackend::Address(addr)),
        (None, None, Some(script)) => ScorerSource::Script(script),
        (None, None, None) => match (scenario, &state.inner.default_scorer) {
            (Some(s), _) => ScorerSource::Script(s.script.clone()),
            (None, Some(backend)) => ScorerSource::Backend(backend.clone()),
            (None, None) => return Err(ServiceError::BadConfig("no scorer: upload a `script` or set a default".into())),
        },
    };
    let scorer: BoxedScorer = match source {
        ScorerSource::Script(script) => {
            if script.frames.len() < timeline.len() {
                return Err(ServiceError::BadConfig(format!(
                    "script covers {} of {} frames",
                    script.frames.len(),
                    timeline.len()
                )));
            }
            Box::new(ScriptedScorer::new(script).map_err(|e| ServiceError::BadConfig(e.to_string()))?)
        }
        ScorerSource::Backend(backend) => tokio::task::spawn_blocking(move || backend.connect())
            .await
            .map_err(|e| ServiceError::Scorer(e.to_string()))??,
    };

    let id = state.fresh_id();
    let core = SessionCore::new(id.clone(), timeline, user_turns, config, scorer)?;
    let info = core.info();
    let (tx, rx) = mpsc::channel(64);
    let handle = SessionHandle {
        commands: tx,
        log: core.log(),
    };
    state
        .inner
        .sessions
        .write()
        .unwrap_or_else(|e| e.into_inner())
        .insert(id, handle);
    tokio::spawn(run_session_loop(core, rx));
    Ok((StatusCode::CREATED, Json(info)))
}

async fn session_info(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<SessionInfo>, ServiceError> {
    let handle = state.session(&id)?;
    Ok(Json(handle.call(&id, Command::Info).await?))
}

async fn advance(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<AdvanceReply>, ServiceError> {
    let handle = state.session(&id)?;
    let n = parse_body::<AdvanceBody>(&body)?.frames.unwrap_or(1);
    Ok(Json(handle.call(&id, |r| Command::Advance(n, r)).await?))
}

async fn post_message(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<impl IntoResponse, ServiceError> {
    let handle = state.session(&id)?;
    let text = parse_body::<MessageBody>(&body)?.text;
    let t = handle.call(&id, |r| Command::Message(text, r)).await?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "t": t }))))
}

async fn update_policy(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<PolicyReply>, ServiceError> {
    let handle = state.session(&id)?;
    let req: PolicyBody = parse_body(&body)?;
    let policy = parse_policy(&req.policy)?;
    Ok(Json(handle.call(&id, |r| Command::Policy(policy, req.reset, r)).await?))
}

async fn play(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<SessionInfo>, ServiceError> {
    let handle = state.session(&id)?;
    let rate = parse_body::<PlayBody>(&body)?.rate.unwrap_or(1.0);
    Ok(Json(handle.call(&id, |r| Command::Play(rate, r)).await?))
}

async fn pause(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionInfo>, ServiceError> {
    let handle = state.session(&id)?;
    Ok(Json(handle.call(&id, Command::Pause).await?))
}

/// `GET /sessions/{id}/events`: server-sent events, one per log entry, with
/// the log position as the event id. The stream ends after `finished`.
async fn events(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ServiceError> {
    let log = state.session(&id)?.log;
    let generation = log.subscribe();
    let stream = futures::stream::unfold(log, move |log| async move {
        match log.changed(generation).await {
            Next::Event(seq, event) => {
                let sse = Event::default()
                    .event(event.kind())
                    .id(seq.to_string())
                    .data(serde_json::to_string(&event).expect("event serializes"));
                Some((Ok(sse), log))
            }
            Next::Wait | Next::Done => None,
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

/// Static frame images from the configured directory.
async fn frame_file(
    State(state): State<AppState>,
    UrlPath(path): UrlPath<String>,
) -> Result<impl IntoResponse, StatusCode> {
    let root = state.inner.frames_dir.as_ref().ok_or(StatusCode::NOT_FOUND)?;
    let rel = Path::new(&path);
    if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(StatusCode::NOT_FOUND);
    }
    let bytes = tokio::fs::read(root.join(rel)).await.map_err(|_| StatusCode::NOT_FOUND)?;
    let mime = match rel.extension().and_then(|e| e.to_str()) {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("png") => "image/png",
        Some("json") => "application/json",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes))
}
