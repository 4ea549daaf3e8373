//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use duet_core::metrics::{GoldAnswer, PredAnswer};
use duet_core::scorer::{ScoreReport, Scorer, ScorerError, ScorerEvent};
use duet_core::transcript::{DuetTranscript, FrameRef, Turn};
use rand::Rng;

/// Scorer whose responses depend on what its context holds, so that the
/// context mode is observable in the output.
pub struct ContextScorer {
    pub scores: Vec<(f64, f64)>,
    context: Vec<String>,
    last_frame: Option<usize>,
}

impl ContextScorer {
    pub fn new(scores: Vec<(f64, f64)>) -> Self {
        Self {
            scores,
            context: Vec::new(),
            last_frame: None,
        }
    }
}

pub fn context_response(frame: usize, context: &[String]) -> String {
    let assistant = context.iter().filter(|c| c.starts_with("assistant:")).count();
    let user = context.iter().filter(|c| c.starts_with("user:")).count();
    format!("f{frame} ctx{} a{assistant} u{user}", context.len())
}

impl Scorer<f64> for ContextScorer {
    fn observe(&mut self, event: &ScorerEvent) -> Result<Option<ScoreReport<f64>>, ScorerError> {
        match event {
            ScorerEvent::SystemText(t) => self.context.push(format!("system:{t}")),
            ScorerEvent::UserText { text, .. } => self.context.push(format!("user:{text}")),
            ScorerEvent::Frame(f) => {
                self.context.push(format!("frame:{}", f.index));
                self.last_frame = Some(f.index);
                let (inf, rel) = self.scores[f.index];
                return ScoreReport::new(inf, rel).map(Some);
            }
            ScorerEvent::AssistantText { text, committed, .. } => {
                if *committed {
                    self.context.push(format!("assistant:{text}"));
                }
            }
        }
        Ok(None)
    }

    fn generate(&mut self) -> Result<String, ScorerError> {
        let frame = self.last_frame.ok_or(ScorerError::NoFrameObserved)?;
        Ok(context_response(frame, &self.context))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum OraclePolicy {
    Sum(f64),
    Combined(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleEntry {
    pub t: f64,
    pub inf: f64,
    pub rel: f64,
    pub acc: f64,
    pub fired: bool,
}

/// Direct transcription of the inference loop: a clock advanced by
/// `1 / fps`, user turns consumed while due, need_response evaluated over
/// the full score history.
pub fn reference_loop(
    system_prompt: &str,
    n_frames: usize,
    fps: f64,
    user_turns: &[(f64, String)],
    scores: &[(f64, f64)],
    policy: OraclePolicy,
    keep_responses: bool,
) -> (Vec<(f64, String)>, Vec<OracleEntry>) {
    let mut model_turns = Vec::new();
    let mut trace = Vec::new();
    let mut v_inf_list: Vec<f64> = Vec::new();
    let mut v_rel_list: Vec<f64> = Vec::new();
    let mut fired_at: Vec<usize> = Vec::new();
    let mut kv_cache = vec![format!("system:{system_prompt}")];
    let mut user_turns: Vec<(f64, String)> = user_turns.to_vec();
    let mut time = 0.0f64;
    for frame in 0..n_frames {
        while !user_turns.is_empty() && time >= user_turns[0].0 {
            kv_cache.push(format!("user:{}", user_turns[0].1));
            user_turns.remove(0);
        }
        kv_cache.push(format!("frame:{frame}"));
        let (v_inf, v_rel) = scores[frame];
        v_inf_list.push(v_inf);
        v_rel_list.push(v_rel);
        // need_response over the score lists.
        let (fire, acc) = match policy {
            OraclePolicy::Sum(s) => {
                let since = fired_at.last().map_or(0, |&k| k + 1);
                let total = v_inf_list[since..].iter().fold(0.0, |a, &x| a + x);
                if total >= s {
                    (true, 0.0)
                } else {
                    (false, total)
                }
            }
            OraclePolicy::Combined(t) => {
                let combined = v_inf_list[frame] + v_rel_list[frame];
                (combined > t, combined)
            }
        };
        trace.push(OracleEntry {
            t: time,
            inf: v_inf,
            rel: v_rel,
            acc,
            fired: fire,
        });
        if fire {
            fired_at.push(frame);
            let response = context_response(frame, &kv_cache);
            if keep_responses {
                kv_cache.push(format!("assistant:{response}"));
            }
            model_turns.push((time, response));
        }
        time += 1.0 / fps;
    }
    (model_turns, trace)
}

/// Nested-loop in-span score.
pub fn brute_in_span(preds: &[PredAnswer], golds: &[GoldAnswer], s: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (q, g) in golds.iter().enumerate() {
        let mut sum = 0.0;
        let mut count = 0;
        for (p, pred) in preds.iter().enumerate() {
            let inside = match pred.time {
                None => true,
                Some(t) => g.start <= t && t <= g.end,
            };
            if inside {
                sum += s[p][q];
                count += 1;
            }
        }
        total += if count == 0 { 1.0 } else { sum / count as f64 };
    }
    total / golds.len() as f64
}

/// AP from the definition: for each gold item, the fraction of gold items
/// among those ranked at or above it, where an item outranks another when
/// its score is higher or the scores tie and its index is lower.
pub fn brute_ap(scores: &[f64], gold: &BTreeSet<usize>) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let outranks = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let mut total = 0.0;
    for &g in gold {
        let above: Vec<usize> = (0..scores.len()).filter(|&i| i == g || outranks(i, g)).collect();
        let gold_above = above.iter().filter(|i| gold.contains(i)).count();
        total += gold_above as f64 / above.len() as f64;
    }
    total / gold.len() as f64
}

pub const ROLES_TEXT: [&str; 2] = ["user", "assistant"];

/// Random valid transcript: optional system prompt, then an alternation of
/// stream runs and text turns with times that never go backwards.
pub fn random_transcript(rng: &mut impl Rng) -> DuetTranscript {
    let mut t = DuetTranscript::new();
    if rng.gen_bool(0.7) {
        t.push(Turn::system(random_text(rng))).unwrap();
    }
    let mut frame = 0usize;
    let mut clock = 0.0;
    let mut last_stream = false;
    for _ in 0..rng.gen_range(0..12) {
        let want_stream = !last_stream && rng.gen_bool(0.5);
        if want_stream {
            let n = rng.gen_range(1..6);
            let frames = (0..n)
                .map(|_| {
                    let f = FrameRef::new(frame, frame as f64 * 0.5, format!("img/{frame}.jpg"));
                    clock = f.timestamp;
                    frame += 1;
                    f
                })
                .collect();
            t.push(Turn::stream(frames)).unwrap();
            last_stream = true;
        } else {
            let role = ROLES_TEXT[rng.gen_range(0..2)];
            let last_role = t.turns().last().map(|x| x.role.as_str());
            let role = if last_role == Some(role) {
                ROLES_TEXT.iter().copied().find(|r| *r != role).unwrap()
            } else {
                role
            };
            let turn = if role == "user" {
                Turn::user(random_text(rng), clock)
            } else {
                Turn::assistant(random_text(rng), clock)
            };
            t.push(turn).unwrap();
            last_stream = false;
        }
    }
    t
}

pub fn random_text(rng: &mut impl Rng) -> String {
    const WORDS: [&str; 10] = [
        "boil", "water", "the", "player", "<im", "end>", "frame", "über", "\n", "  ",
    ];
    let n = rng.gen_range(1..8);
    let text: String = (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ");
    if text.trim().is_empty() {
        "x".into()
    } else {
        text
    }
}
