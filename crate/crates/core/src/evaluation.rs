//! Corpus-level evaluation over JSON Lines prediction and gold files.
//!
//! Records are paired by `id` when every record carries one, otherwise by
//! line position. Per-query metrics are computed in parallel and reduced in
//! input order, so results do not depend on scheduling.
//!
//! Schemas (one object per line):
//!
//! | task       | prediction                                              | gold                                   |
//! |------------|---------------------------------------------------------|----------------------------------------|
//! | magqa      | `{"id","turns":[{"time"?,"start"?,"end"?,"text"}]}`     | `{"id","answers":[{"start","end","text"}]}` |
//! | grounding  | `{"id","fps","relevance":[..]}` or `{"id","trace":[..]}` | `{"id","span":[start,end]}`            |
//! | highlight  | `{"id","scores":[..]}` or `{"id","trace":[..]}`         | `{"id","relevant":[clip,..]}`          |
//! | captioning | `{"id","model_turns":[{"time","text"}]}`                | `{"id","steps":[{"start","end","caption"}]}` |
//!
//! A session result line (`{"model_turns":..,"trace":..}`) is accepted
//! directly as a prediction for every task: `model_turns` doubles as
//! `turns`, and the trace provides relevance scores and frame times.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{ScoreTrace, TimedMessage};
use crate::metrics::{self, GoldAnswer, Judge, JudgeMatrix, MetricsError, PredAnswer, StepSpan};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{preds} predictions cannot be paired with {golds} gold records without ids")]
    CountMismatch { preds: usize, golds: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("prediction {0:?} has no gold record")]
    UnknownId(String),
    #[error("no prediction for {0:?}")]
    MissingPrediction(String),
    #[error("record {id:?}: {reason}")]
    BadRecord { id: String, reason: String },
}

trait Keyed {
    fn key(&self) -> Option<&str>;
}

macro_rules! keyed {
    ($($ty:ty),*) => {$(
        impl Keyed for $ty {
            fn key(&self) -> Option<&str> {
                self.id.as_deref()
            }
        }
    )*};
}

type Paired<'a, P, G> = Vec<(String, Option<&'a P>, &'a G)>;

/// Pairs each gold record with its prediction (`None` when missing).
fn pair<'a, P: Keyed, G: Keyed>(
    preds: &'a [P],
    golds: &'a [G],
) -> Result<Paired<'a, P, G>, EvalError> {
    let keyed = preds.iter().all(|p| p.key().is_some()) && golds.iter().all(|g| g.key().is_some());
    if !keyed {
        if preds.len() != golds.len() {
            return Err(EvalError::CountMismatch {
                preds: preds.len(),
                golds: golds.len(),
            });
        }
        return Ok(preds
            .iter()
            .zip(golds)
            .enumerate()
            .map(|(i, (p, g))| (g.key().map_or_else(|| format!("#{i}"), str::to_owned), Some(p), g))
            .collect());
    }
    let mut by_id: HashMap<&str, &P> = HashMap::new();
    for p in preds {
        let id = p.key().expect("checked above");
        if by_id.insert(id, p).is_some() {
            return Err(EvalError::DuplicateId(id.to_owned()));
        }
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(golds.len());
    for g in golds {
        let id = g.key().expect("checked above");
        if !seen.insert(id) {
            return Err(EvalError::DuplicateId(id.to_owned()));
        }
        out.push((id.to_owned(), by_id.get(id).copied(), g));
    }
    if let Some(extra) = preds.iter().filter_map(Keyed::key).find(|id| !seen.contains(id)) {
        return Err(EvalError::UnknownId(extra.to_owned()));
    }
    Ok(out)
}

fn mean<T: Scalar>(values: &[T]) -> T {
    if values.is_empty() {
        return T::zero();
    }
    values.iter().copied().sum::<T>() / T::from_count(values.len())
}

fn require<'a, P>(id: &str, pred: Option<&'a P>) -> Result<&'a P, EvalError> {
    pred.ok_or_else(|| EvalError::MissingPrediction(id.to_owned()))
}

/// A predicted MAGQA turn: an explicit time, a span (answered at its
/// midpoint), or neither (paired with every gold answer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredTurn {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<f64>,
    pub text: String,
}

impl PredTurn {
    fn to_answer(&self) -> Result<PredAnswer, MetricsError> {
        match (self.time, self.start, self.end) {
            (Some(t), _, _) => PredAnswer::timed(t, self.text.clone()),
            (None, Some(s), Some(e)) => {
                if !(s <= e) {
                    return Err(MetricsError::InvalidSpan { start: s, end: e });
                }
                PredAnswer::timed(metrics::baseline_response_time(s, e), self.text.clone())
            }
            _ => Ok(PredAnswer::untimed(self.text.clone())),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct MagqaPrediction {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(alias = "model_turns")]
    pub turns: Vec<PredTurn>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct MagqaGold {
    #[serde(default)]
    pub id: Option<String>,
    pub answers: Vec<GoldAnswer>,
}

keyed!(MagqaPrediction, MagqaGold);

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct MagqaReport<T> {
    pub examples: usize,
    /// Unweighted mean of per-example in-span scores.
    pub in_span_score: T,
    /// Mean predicted turns per example, before and after dedup.
    pub turns: T,
    pub turns_dedup: T,
}

pub fn eval_magqa<T: Scalar>(
    preds: &[MagqaPrediction],
    golds: &[MagqaGold],
    judge: &dyn Judge,
) -> Result<MagqaReport<T>, EvalError> {
    let pairs = pair(preds, golds)?;
    let per_example: Vec<(T, usize, usize)> = pairs
        .par_iter()
        .map(|(id, pred, gold)| {
            let turns = pred.map_or(&[][..], |p| p.turns.as_slice());
            let answers = turns
                .iter()
                .map(PredTurn::to_answer)
                .collect::<Result<Vec<_>, _>>()?;
            let matrix = JudgeMatrix::<T>::from_judge(&answers, &gold.answers, judge)?;
            let score = metrics::in_span_score(&answers, &gold.answers, &matrix).map_err(|e| {
                EvalError::BadRecord {
                    id: id.clone(),
                    reason: e.to_string(),
                }
            })?;
            let messages: Vec<TimedMessage> = turns
                .iter()
                .map(|t| TimedMessage::new(t.time.unwrap_or(f64::NAN), t.text.clone()))
                .collect();
            Ok((score, turns.len(), metrics::dedup_turns(&messages).len()))
        })
        .collect::<Result<_, EvalError>>()?;
    let scores: Vec<T> = per_example.iter().map(|r| r.0).collect();
    let turns: Vec<T> = per_example.iter().map(|r| T::from_count(r.1)).collect();
    let dedup: Vec<T> = per_example.iter().map(|r| T::from_count(r.2)).collect();
    Ok(MagqaReport {
        examples: per_example.len(),
        in_span_score: mean(&scores),
        turns: mean(&turns),
        turns_dedup: mean(&dedup),
    })
}

/// Per-frame relevance, given directly or as a session trace.
#[derive(Debug, Clone, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RelevancePrediction<T> {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub fps: Option<f64>,
    #[serde(default, alias = "scores")]
    pub relevance: Option<Vec<T>>,
    #[serde(default)]
    pub trace: Option<ScoreTrace<T>>,
}

impl<T: Scalar> RelevancePrediction<T> {
    /// `(frame times, relevance)`; times are `k / fps` unless a trace is given.
    fn series(&self, id: &str) -> Result<(Vec<f64>, Vec<T>), EvalError> {
        let bad = |reason: &str| EvalError::BadRecord {
            id: id.to_owned(),
            reason: reason.to_owned(),
        };
        match (&self.relevance, &self.trace) {
            (Some(rel), _) => {
                let times = match self.fps {
                    Some(fps) if fps > 0.0 => (0..rel.len()).map(|k| k as f64 / fps).collect(),
                    _ => Vec::new(),
                };
                Ok((times, rel.clone()))
            }
            (None, Some(trace)) => Ok((
                trace.entries().iter().map(|e| e.t).collect(),
                trace.relevance(),
            )),
            (None, None) => Err(bad("needs `relevance`/`scores` or `trace`")),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct GroundingGold {
    #[serde(default)]
    pub id: Option<String>,
    pub span: (f64, f64),
}

#[derive(Debug, Clone, Deserialize)]
pub struct HighlightGold {
    #[serde(default)]
    pub id: Option<String>,
    pub relevant: BTreeSet<usize>,
}

keyed!(GroundingGold, HighlightGold);

impl<T> Keyed for RelevancePrediction<T> {
    fn key(&self) -> Option<&str> {
        self.id.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelevanceOptions<T> {
    pub smooth_w: usize,
    pub normalize: bool,
    pub rel_threshold: T,
}

impl<T: Scalar> Default for RelevanceOptions<T> {
    fn default() -> Self {
        Self {
            smooth_w: 0,
            normalize: true,
            rel_threshold: T::from_seconds(metrics::DEFAULT_REL_THRESHOLD),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct GroundingReport<T> {
    pub queries: usize,
    pub mean_iou: T,
    #[serde(rename = "r@0.5")]
    pub r_at_05: T,
    #[serde(rename = "r@0.7")]
    pub r_at_07: T,
}

pub fn eval_grounding<T: Scalar>(
    preds: &[RelevancePrediction<T>],
    golds: &[GroundingGold],
    opts: &RelevanceOptions<T>,
) -> Result<GroundingReport<T>, EvalError> {
    let pairs = pair(preds, golds)?;
    let ious: Vec<T> = pairs
        .par_iter()
        .map(|(id, pred, gold)| {
            let (times, rel) = require(id, *pred)?.series(id)?;
            if times.len() != rel.len() {
                return Err(EvalError::BadRecord {
                    id: id.clone(),
                    reason: "relevance scores need `fps` to place frames in time".into(),
                });
            }
            let (s, e) = gold.span;
            if !(s <= e) {
                return Err(MetricsError::InvalidSpan { start: s, end: e }.into());
            }
            let predicted = metrics::classify_relevant(&rel, opts.smooth_w, opts.normalize, opts.rel_threshold);
            let gold_frames: BTreeSet<usize> = times
                .iter()
                .enumerate()
                .filter(|(_, &t)| t >= s && t <= e)
                .map(|(i, _)| i)
                .collect();
            Ok(metrics::frame_iou(&predicted, &gold_frames))
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(GroundingReport {
        queries: ious.len(),
        mean_iou: mean(&ious),
        r_at_05: metrics::recall_at(&ious, T::from_seconds(0.5)),
        r_at_07: metrics::recall_at(&ious, T::from_seconds(0.7)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct HighlightReport<T> {
    pub queries: usize,
    #[serde(rename = "mAP")]
    pub map: T,
    #[serde(rename = "HIT@1")]
    pub hit_at_1: T,
}

pub fn eval_highlight<T: Scalar>(
    preds: &[RelevancePrediction<T>],
    golds: &[HighlightGold],
    opts: &RelevanceOptions<T>,
) -> Result<HighlightReport<T>, EvalError> {
    let pairs = pair(preds, golds)?;
    let per_query: Vec<(T, T)> = pairs
        .par_iter()
        .map(|(id, pred, gold)| {
            let (_, rel) = require(id, *pred)?.series(id)?;
            let mut scores = crate::policy::smooth(&rel, opts.smooth_w);
            if opts.normalize && !scores.is_empty() {
                scores = crate::policy::minmax_normalize(&scores).expect("non-empty");
            }
            Ok((
                metrics::highlight_ap(&scores, &gold.relevant)?,
                metrics::hit_at_1(&scores, &gold.relevant)?,
            ))
        })
        .collect::<Result<_, EvalError>>()?;
    let aps: Vec<T> = per_query.iter().map(|r| r.0).collect();
    let hits: Vec<T> = per_query.iter().map(|r| r.1).collect();
    Ok(HighlightReport {
        queries: per_query.len(),
        map: mean(&aps),
        hit_at_1: mean(&hits),
    })
}

#[derive(Debug, Clone, Deserialize)]
pub struct CaptionPrediction {
    #[serde(default)]
    pub id: Option<String>,
    pub model_turns: Vec<TimedMessage>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CaptionGold {
    #[serde(default)]
    pub id: Option<String>,
    pub steps: Vec<StepSpan>,
}

keyed!(CaptionPrediction, CaptionGold);

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct CaptioningReport<T> {
    pub videos: usize,
    /// Mean over videos of span F1 averaged over the IoU thresholds.
    pub f1: T,
}

pub fn eval_captioning<T: Scalar>(
    preds: &[CaptionPrediction],
    golds: &[CaptionGold],
    thresholds: &[f64],
) -> Result<CaptioningReport<T>, EvalError> {
    let pairs = pair(preds, golds)?;
    let f1s: Vec<T> = pairs
        .par_iter()
        .map(|(id, pred, gold)| {
            let mut turns = require(id, *pred)?.model_turns.clone();
            turns.sort_by(|a, b| a.time.total_cmp(&b.time));
            let spans = metrics::derive_caption_spans(&turns);
            Ok(metrics::captioning_f1(&spans, &gold.steps, thresholds))
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(CaptioningReport {
        videos: f1s.len(),
        f1: mean(&f1s),
    })
}

/// Reads a JSON Lines file of any of the record types above.
pub fn read_records<R: for<'de> Deserialize<'de>>(reader: impl BufRead) -> Result<Vec<R>, EvalError> {
    Ok(metrics::read_jsonl(reader)?)
}
