use std::collections::BTreeSet;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use duet_core::engine::{run_session, FrameTimeline, SessionConfig, SessionState, TimedMessage};
use duet_core::policy::PolicyConfig;
use duet_core::scenario::ScenarioLibrary;
use duet_core::scorer::{ScriptedScorer, ScriptedScript};
use duet_service::{router, AppState, ServiceEvent};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app() -> Router {
    router(AppState::new(ScenarioLibrary::bundled()))
}

async fn send(app: &Router, method: Method, uri: &str, body: Value) -> (StatusCode, Value) {
    let body = if body.is_null() {
        Body::empty()
    } else {
        Body::from(body.to_string())
    };
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body)
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    send(app, Method::POST, uri, body).await
}

async fn create(app: &Router, body: Value) -> String {
    let (status, info) = post(app, "/sessions", body).await;
    assert_eq!(status, StatusCode::CREATED, "{info}");
    info["id"].as_str().unwrap().to_owned()
}

async fn advance(app: &Router, id: &str, frames: usize) -> Vec<ServiceEvent> {
    let (status, reply) = post(app, &format!("/sessions/{id}/advance"), json!({ "frames": frames })).await;
    assert_eq!(status, StatusCode::OK, "{reply}");
    serde_json::from_value(reply["events"].clone()).unwrap()
}

#[derive(Debug, Clone, PartialEq)]
struct SseEvent {
    kind: String,
    id: u64,
    event: ServiceEvent,
}

fn parse_sse(text: &str) -> Vec<SseEvent> {
    text.split("\n\n")
        .filter_map(|block| {
            let (mut kind, mut id, mut data) = (None, None, None);
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("event: ") {
                    kind = Some(v.to_owned());
                } else if let Some(v) = line.strip_prefix("id: ") {
                    id = Some(v.parse().unwrap());
                } else if let Some(v) = line.strip_prefix("data: ") {
                    data = Some(serde_json::from_str(v).unwrap());
                }
            }
            Some(SseEvent {
                kind: kind?,
                id: id?,
                event: data?,
            })
        })
        .collect()
}

/// Opens the event stream and reads until it ends, or until `limit` events
/// have arrived.
async fn subscribe(app: &Router, id: &str, limit: Option<usize>) -> Vec<SseEvent> {
    let req = Request::get(format!("/sessions/{id}/events")).body(Body::empty()).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    assert_eq!(res.headers()["content-type"], "text/event-stream");
    let mut body = res.into_body();
    let mut text = String::new();
    let read = async {
        while let Some(frame) = body.frame().await {
            if let Ok(data) = frame.unwrap().into_data() {
                text.push_str(std::str::from_utf8(&data).unwrap());
            }
            if limit.is_some_and(|n| parse_sse(&text).len() >= n) {
                break;
            }
        }
    };
    tokio::time::timeout(Duration::from_secs(10), read).await.expect("event stream stalled");
    parse_sse(&text)
}

fn events_of(stream: &[SseEvent]) -> Vec<ServiceEvent> {
    stream.iter().map(|e| e.event.clone()).collect()
}

/// The 4-frame session: inf [0, 0, 1, 1], one user turn at 1.0, sum:s=2.
fn four_frame_request() -> Value {
    json!({
        "timeline": FrameTimeline::uniform(4, 1.0, |k| format!("f{k}.jpg")),
        "script": ScriptedScript::from_scores(&[(0.0, 0.0), (0.0, 0.0), (1.0, 0.0), (1.0, 0.0)], "resp"),
        "user_turns": [{"time": 1.0, "text": "What is happening?"}],
        "policy": "sum:s=2",
    })
}

fn frame(index: usize, t: f64, inf: f64, acc: f64, fired: bool) -> ServiceEvent {
    ServiceEvent::FrameScored {
        index,
        t,
        inf,
        rel: 0.0,
        acc,
        fired,
    }
}

/// Checks that responses follow their frame's `frame_scored` directly or
/// after other events of the same frame, and precede the next frame.
fn assert_response_order(events: &[ServiceEvent]) {
    let mut last_frame: Option<(f64, bool)> = None;
    let mut answered = false;
    for e in events {
        match e {
            ServiceEvent::FrameScored { t, fired, .. } => {
                if let Some((_, true)) = last_frame {
                    assert!(answered, "fired frame without response");
                }
                last_frame = Some((*t, *fired));
                answered = false;
            }
            ServiceEvent::Response { t, .. } => {
                let (ft, fired) = last_frame.expect("response before any frame");
                assert!(fired && ft == *t && !answered);
                answered = true;
            }
            _ => {}
        }
    }
}

#[tokio::test]
async fn lists_scenarios() {
    let app = app();
    let (status, list) = send(&app, Method::GET, "/scenarios", Value::Null).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = list.as_array().unwrap().iter().map(|s| s["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["cooking-demo", "magqa-demo"]);
    let (status, detail) = send(&app, Method::GET, "/scenarios/cooking-demo", Value::Null).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(detail["timeline"]["frames"].as_array().unwrap().len(), 40);
    assert_eq!(detail["frame_count"], 40);
    let (status, _) = send(&app, Method::GET, "/scenarios/nope", Value::Null).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn create_session_errors() {
    let app = app();
    let id = create(&app, json!({"scenario": "cooking-demo", "policy": "sum:s=2"})).await;
    let (status, info) = send(&app, Method::GET, &format!("/sessions/{id}"), Value::Null).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(info["status"], "created");
    assert_eq!(info["cursor"], 0);
    assert_eq!(info["policy"], "sum:s=2");

    let (status, err) = post(&app, "/sessions", json!({"scenario": "nope"})).await;
    assert_eq!((status, err["error"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_scenario")));
    for fps in [0.0, -1.0] {
        let (status, err) = post(&app, "/sessions", json!({"scenario": "cooking-demo", "fps": fps})).await;
        assert_eq!((status, err["error"].as_str()), (StatusCode::BAD_REQUEST, Some("bad_config")));
    }
    let mut upload = four_frame_request();
    upload["timeline"]["fps"] = json!(0.0);
    let (status, _) = post(&app, "/sessions", upload).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post(&app, "/sessions", json!({"scenario": "cooking-demo", "policy": "sum:s=-1"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post(&app, "/sessions", json!({"timeline": {"fps": 1.0, "frames": []}})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post(&app, "/sessions", json!({"scenario": "cooking-demo", "bogus": 1})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, err) = post(&app, "/sessions/zzz/advance", Value::Null).await;
    assert_eq!((status, err["error"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_session")));
}

#[tokio::test]
async fn four_frame_session_matches_engine() {
    let app = app();
    let id = create(&app, four_frame_request()).await;
    let mut events = advance(&app, &id, 2).await;
    events.extend(advance(&app, &id, 2).await);
    let expected = vec![
        frame(0, 0.0, 0.0, 0.0, false),
        ServiceEvent::UserAck {
            t: 1.0,
            text: "What is happening?".into(),
        },
        frame(1, 1.0, 0.0, 0.0, false),
        frame(2, 2.0, 1.0, 1.0, false),
        frame(3, 3.0, 1.0, 0.0, true),
        ServiceEvent::Response {
            t: 3.0,
            text: "resp".into(),
        },
        ServiceEvent::Finished {
            frames: 4,
            responses: 1,
            error: None,
        },
    ];
    assert_eq!(events, expected);

    // Same as stepping the engine directly.
    let timeline = FrameTimeline::uniform(4, 1.0, |k| format!("f{k}.jpg"));
    let mut scorer =
        ScriptedScorer::new(ScriptedScript::from_scores(&[(0.0, 0.0), (0.0, 0.0), (1.0, 0.0), (1.0, 0.0)], "resp"))
            .unwrap();
    let mut state = SessionState::new(
        SessionConfig::new(1.0, PolicyConfig::sum(2.0).unwrap()),
        vec![TimedMessage::new(1.0, "What is happening?")],
    )
    .unwrap();
    let mut direct = Vec::new();
    for f in &timeline.frames {
        direct.extend(state.step(&mut scorer, f).unwrap().into_iter().map(ServiceEvent::from));
    }
    assert_eq!(direct[..], expected[..expected.len() - 1]);

    let stream = subscribe(&app, &id, None).await;
    assert_eq!(events_of(&stream), expected);
    let kinds: Vec<&str> = stream.iter().map(|e| e.kind.as_str()).collect();
    assert_eq!(kinds[..2], ["frame_scored", "user_ack"]);
    assert_eq!(stream.iter().map(|e| e.id).collect::<Vec<_>>(), (0..7).collect::<Vec<u64>>());
}

#[tokio::test]
async fn advance_past_end_and_after_finish() {
    let app = app();
    let id = create(&app, four_frame_request()).await;
    let events = advance(&app, &id, 100).await;
    assert_eq!(events.iter().filter(|e| matches!(e, ServiceEvent::FrameScored { .. })).count(), 4);
    assert!(matches!(events.last(), Some(ServiceEvent::Finished { frames: 4, .. })));
    for (uri, body) in [
        ("advance", json!({"frames": 1})),
        ("message", json!({"text": "late"})),
        ("play", Value::Null),
    ] {
        let (status, err) = post(&app, &format!("/sessions/{id}/{uri}"), body).await;
        assert_eq!(status, StatusCode::CONFLICT, "{uri}");
        assert_eq!(err["error"], "session_finished");
    }
}

#[tokio::test]
async fn message_while_paused_is_timed_at_next_frame() {
    let app = app();
    let mut req = four_frame_request();
    req["timeline"] = json!(FrameTimeline::uniform(10, 2.0, |k| format!("f{k}")));
    req["script"] = json!(ScriptedScript::from_scores(&[(0.0, 0.0); 10], "resp"));
    req["user_turns"] = json!([]);
    let id = create(&app, req).await;
    advance(&app, &id, 6).await;
    // A glacial playback rate never ticks during the test.
    let (status, info) = post(&app, &format!("/sessions/{id}/play"), json!({"rate": 1e-6})).await;
    assert_eq!((status, info["status"].as_str()), (StatusCode::OK, Some("playing")));
    let (status, info) = post(&app, &format!("/sessions/{id}/pause"), Value::Null).await;
    assert_eq!((status, info["status"].as_str()), (StatusCode::OK, Some("paused")));
    assert_eq!(info["cursor"], 6);

    let (status, ack) = post(&app, &format!("/sessions/{id}/message"), json!({"text": "first"})).await;
    assert_eq!((status, ack["t"].as_f64()), (StatusCode::ACCEPTED, Some(3.0)));
    let (_, ack) = post(&app, &format!("/sessions/{id}/message"), json!({"text": "second"})).await;
    assert_eq!(ack["t"], 3.0);
    let events = advance(&app, &id, 1).await;
    assert_eq!(
        events[..2],
        [
            ServiceEvent::UserAck {
                t: 3.0,
                text: "first".into()
            },
            ServiceEvent::UserAck {
                t: 3.0,
                text: "second".into()
            },
        ]
    );
    assert!(matches!(events[2], ServiceEvent::FrameScored { index: 6, t, .. } if t == 3.0));
    let (status, _) = post(&app, &format!("/sessions/{id}/message"), json!({"text": ""})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn pause_requires_playback() {
    let app = app();
    let id = create(&app, four_frame_request()).await;
    let (status, err) = post(&app, &format!("/sessions/{id}/pause"), Value::Null).await;
    assert_eq!((status, err["error"].as_str()), (StatusCode::CONFLICT, Some("invalid_transition")));
}

#[tokio::test]
async fn playback_advances_on_its_own() {
    let app = app();
    let id = create(&app, four_frame_request()).await;
    let (status, _) = post(&app, &format!("/sessions/{id}/play"), json!({"rate": 100.0})).await;
    assert_eq!(status, StatusCode::OK);
    let stream = events_of(&subscribe(&app, &id, None).await);

    let reference = create(&app, four_frame_request()).await;
    assert_eq!(stream, advance(&app, &reference, 4).await);
    let (_, info) = send(&app, Method::GET, &format!("/sessions/{id}"), Value::Null).await;
    assert_eq!(info["status"], "finished");
}

fn fired_indices(events: &[ServiceEvent]) -> BTreeSet<usize> {
    events
        .iter()
        .filter_map(|e| match e {
            ServiceEvent::FrameScored { index, fired: true, .. } => Some(*index),
            _ => None,
        })
        .collect()
}

#[tokio::test]
async fn lowering_threshold_mid_session_only_adds_responses() {
    let app = app();
    let fixed = create(&app, json!({"scenario": "magqa-demo", "policy": "combo:t=0.6"})).await;
    let baseline = fired_indices(&advance(&app, &fixed, 100).await);

    let id = create(&app, json!({"scenario": "magqa-demo", "policy": "combo:t=0.6"})).await;
    let head = advance(&app, &id, 12).await;
    let (status, reply) = post(&app, &format!("/sessions/{id}/policy"), json!({"policy": "combo:t=0.3"})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(reply, json!({"changed": true, "policy": "combo:t=0.3"}));
    let tail = advance(&app, &id, 100).await;

    let head_fired = fired_indices(&head);
    assert_eq!(head_fired, baseline.iter().copied().filter(|&i| i < 12).collect());
    let tail_fired = fired_indices(&tail);
    let baseline_tail: BTreeSet<usize> = baseline.iter().copied().filter(|&i| i >= 12).collect();
    assert!(baseline_tail.is_subset(&tail_fired));
    assert!(tail_fired.len() > baseline_tail.len());
}

#[tokio::test]
async fn policy_update_edge_cases() {
    let app = app();
    let id = create(&app, json!({"scenario": "cooking-demo", "policy": "sum:s=2"})).await;
    let (status, err) = post(&app, &format!("/sessions/{id}/policy"), json!({"policy": "sum:q=2"})).await;
    assert_eq!((status, err["error"].as_str()), (StatusCode::BAD_REQUEST, Some("bad_config")));
    let (status, reply) = post(&app, &format!("/sessions/{id}/policy"), json!({"policy": "sum:s=2"})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(reply["changed"], false);

    // The accumulator survives a threshold change unless reset.
    advance(&app, &id, 3).await;
    let (_, before) = send(&app, Method::GET, &format!("/sessions/{id}"), Value::Null).await;
    post(&app, &format!("/sessions/{id}/policy"), json!({"policy": "sum:s=5"})).await;
    let (_, kept) = send(&app, Method::GET, &format!("/sessions/{id}"), Value::Null).await;
    assert_eq!(kept["accumulator"], before["accumulator"]);
    post(&app, &format!("/sessions/{id}/policy"), json!({"policy": "sum:s=5", "reset": true})).await;
    let (_, reset) = send(&app, Method::GET, &format!("/sessions/{id}"), Value::Null).await;
    assert_eq!(reset["accumulator"], 0.0);
}

async fn run_with_splits(app: &Router, splits: &[usize]) -> Vec<ServiceEvent> {
    let id = create(app, json!({"scenario": "cooking-demo", "policy": "sum:s=2"})).await;
    let mut out = Vec::new();
    for &n in splits {
        out.extend(advance(app, &id, n).await);
    }
    assert_eq!(events_of(&subscribe(app, &id, None).await), out);
    out
}

#[tokio::test]
async fn split_advances_emit_the_same_events() {
    let app = app();
    let whole = run_with_splits(&app, &[40]).await;
    for splits in [&[1, 39][..], &[17, 23], &[5, 5, 5, 25], &[39, 1], &[0, 40], &[13, 50]] {
        assert_eq!(run_with_splits(&app, splits).await, whole, "{splits:?}");
    }
    assert_response_order(&whole);

    let lib = ScenarioLibrary::<f64>::bundled();
    let result = lib.get("cooking-demo").unwrap().run(None).unwrap();
    let responses: Vec<TimedMessage> = whole
        .iter()
        .filter_map(|e| match e {
            ServiceEvent::Response { t, text } => Some(TimedMessage::new(*t, text.clone())),
            _ => None,
        })
        .collect();
    assert_eq!(responses, result.model_turns);
}

async fn scripted_commands(app: &Router) -> Vec<ServiceEvent> {
    let id = create(app, json!({"scenario": "magqa-demo"})).await;
    advance(app, &id, 4).await;
    post(app, &format!("/sessions/{id}/message"), json!({"text": "Who scored?"})).await;
    advance(app, &id, 7).await;
    post(app, &format!("/sessions/{id}/policy"), json!({"policy": "combo:t=0.3"})).await;
    advance(app, &id, 3).await;
    post(app, &format!("/sessions/{id}/policy"), json!({"policy": "sum:s=1.5"})).await;
    advance(app, &id, 50).await;
    events_of(&subscribe(app, &id, None).await)
}

#[tokio::test]
async fn event_stream_is_deterministic() {
    let app = app();
    let first = scripted_commands(&app).await;
    assert_eq!(scripted_commands(&app).await, first);
    assert_eq!(scripted_commands(&self::app()).await, first);
    assert_response_order(&first);
    assert!(first.contains(&ServiceEvent::UserAck {
        t: 4.0,
        text: "Who scored?".into()
    }));
}

#[tokio::test]
async fn new_subscriber_replays_undelivered_events() {
    let app = app();
    let id = create(&app, json!({"scenario": "cooking-demo", "policy": "sum:s=2"})).await;
    advance(&app, &id, 10).await;
    let first = subscribe(&app, &id, Some(4)).await;
    assert_eq!(first.len(), 4);
    advance(&app, &id, 40).await;
    let rest = subscribe(&app, &id, None).await;
    assert_eq!(rest[0].id, 4);
    let mut all = first;
    all.extend(rest);
    assert_eq!(all.iter().map(|e| e.id).collect::<Vec<_>>(), (0..all.len() as u64).collect::<Vec<_>>());
    assert!(matches!(all.last().unwrap().event, ServiceEvent::Finished { .. }));
    // Everything was delivered; a late subscriber sees the stream end.
    assert!(subscribe(&app, &id, None).await.is_empty());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_are_independent() {
    let app = app();
    let lib = ScenarioLibrary::<f64>::bundled();
    let tasks: Vec<_> = (0..8)
        .map(|i| {
            let app = app.clone();
            let (scenario, policy) = if i % 2 == 0 {
                ("cooking-demo", "sum:s=2")
            } else {
                ("magqa-demo", "combo:t=0.5")
            };
            tokio::spawn(async move {
                let id = create(&app, json!({"scenario": scenario, "policy": policy})).await;
                let mut events = Vec::new();
                while !matches!(events.last(), Some(ServiceEvent::Finished { .. })) {
                    events.extend(advance(&app, &id, 4 + i).await);
                }
                (scenario, policy, events)
            })
        })
        .collect();
    for task in tasks {
        let (scenario, policy, events) = task.await.unwrap();
        let expected = lib.get(scenario).unwrap().run(Some(policy.parse().unwrap())).unwrap();
        let frames = events.iter().filter(|e| matches!(e, ServiceEvent::FrameScored { .. })).count();
        assert_eq!(frames, expected.trace.len());
        let responses: Vec<TimedMessage> = events
            .iter()
            .filter_map(|e| match e {
                ServiceEvent::Response { t, text } => Some(TimedMessage::new(*t, text.clone())),
                _ => None,
            })
            .collect();
        assert_eq!(responses, expected.model_turns);
    }
}

#[tokio::test]
async fn remote_scorer_over_tcp() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let script = ScriptedScript::from_scores(&[(0.0, 0.0), (0.0, 0.0), (1.0, 0.0), (1.0, 0.0)], "resp");
        let mut scorer = ScriptedScorer::new(script).unwrap();
        let reader = std::io::BufReader::new(stream.try_clone().unwrap());
        duet_core::wire::serve::<f64, _>(&mut scorer, reader, stream).unwrap();
    });
    let app = app();
    let mut req = four_frame_request();
    req.as_object_mut().unwrap().remove("script");
    req["scorer_addr"] = json!(addr.to_string());
    let id = create(&app, req).await;
    let remote = advance(&app, &id, 4).await;
    let local_id = create(&app, four_frame_request()).await;
    assert_eq!(remote, advance(&app, &local_id, 4).await);
    drop(app);
    server.join().unwrap();

    let timeline = FrameTimeline::uniform(4, 1.0, |k| format!("f{k}.jpg"));
    let mut scorer =
        ScriptedScorer::new(ScriptedScript::from_scores(&[(0.0, 0.0), (0.0, 0.0), (1.0, 0.0), (1.0, 0.0)], "resp"))
            .unwrap();
    let config = SessionConfig::new(1.0, PolicyConfig::sum(2.0).unwrap());
    let result = run_session(&timeline, vec![TimedMessage::new(1.0, "What is happening?")], &mut scorer, config).unwrap();
    assert!(remote.contains(&ServiceEvent::Response {
        t: result.model_turns[0].time,
        text: result.model_turns[0].text.clone()
    }));
}

#[tokio::test]
async fn no_scorer_for_upload_without_script() {
    let app = app();
    let mut req = four_frame_request();
    req.as_object_mut().unwrap().remove("script");
    let (status, err) = post(&app, "/sessions", req).await;
    assert_eq!((status, err["error"].as_str()), (StatusCode::BAD_REQUEST, Some("bad_config")));
}

#[tokio::test]
async fn serves_frames_from_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("cooking-demo")).unwrap();
    std::fs::write(dir.path().join("cooking-demo/frame_0000.jpg"), b"\xff\xd8jpeg").unwrap();
    let app = router(AppState::with_options(
        ScenarioLibrary::bundled(),
        None,
        Some(dir.path().to_owned()),
    ));
    let req = Request::get("/frames/cooking-demo/frame_0000.jpg").body(Body::empty()).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    assert_eq!(res.headers()["content-type"], "image/jpeg");
    assert_eq!(&res.into_body().collect().await.unwrap().to_bytes()[..], b"\xff\xd8jpeg");
    let req = Request::get("/frames/cooking-demo/missing.jpg").body(Body::empty()).unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::NOT_FOUND);
    let req = Request::get("/frames/../etc/passwd").body(Body::empty()).unwrap();
    assert_eq!(app.oneshot(req).await.unwrap().status(), StatusCode::NOT_FOUND);
}
