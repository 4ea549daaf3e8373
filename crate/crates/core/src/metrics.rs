//! Evaluation metrics: in-span score for multi-answer grounded QA, frame
//! IoU and recall for grounding, AP and HIT@1 for highlight detection,
//! caption span derivation and span F1 for dense captioning, turn dedup.
//!
//! Everything here is pure. Times are seconds (`f64`); metric values are
//! generic over [`Scalar`].

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{FrameTimeline, TimedMessage};
use crate::Scalar;

/// IoU thresholds averaged by [`captioning_f1`].
pub const CAPTION_IOU_THRESHOLDS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];

/// Normalized smoothed relevance at or above this marks a frame relevant.
pub const DEFAULT_REL_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no gold answers")]
    EmptyGold,
    #[error("judge matrix is {rows}x{cols}, expected {preds}x{golds}")]
    DimensionMismatch {
        rows: usize,
        cols: usize,
        preds: usize,
        golds: usize,
    },
    #[error("judge score {0} outside [1, 5]")]
    JudgeOutOfRange(f64),
    #[error("no cached judgement for pred {pred:?} / gold {gold:?}")]
    MissingJudgement { pred: String, gold: String },
    #[error("invalid span [{start}, {end}]")]
    InvalidSpan { start: f64, end: f64 },
    #[error("invalid prediction time {0}")]
    InvalidTime(f64),
    #[error("clip index {index} out of range for {len} scores")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldAnswer {
    pub start: f64,
    pub end: f64,
    pub text: String,
}

impl GoldAnswer {
    pub fn new(start: f64, end: f64, text: impl Into<String>) -> Result<Self, MetricsError> {
        if !(start <= end) {
            return Err(MetricsError::InvalidSpan { start, end });
        }
        Ok(Self {
            start,
            end,
            text: text.into(),
        })
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }
}

/// A predicted answer. `time: None` marks an answer given without a time,
/// which is paired with every gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredAnswer {
    pub time: Option<f64>,
    pub text: String,
}

impl PredAnswer {
    pub fn timed(time: f64, text: impl Into<String>) -> Result<Self, MetricsError> {
        if !(time >= 0.0) {
            return Err(MetricsError::InvalidTime(time));
        }
        Ok(Self {
            time: Some(time),
            text: text.into(),
        })
    }

    pub fn untimed(text: impl Into<String>) -> Self {
        Self {
            time: None,
            text: text.into(),
        }
    }

    fn in_span(&self, gold: &GoldAnswer) -> bool {
        self.time.is_none_or(|t| gold.contains(t))
    }
}

/// Response time assigned to a prediction given as a span.
pub fn baseline_response_time(span_start: f64, span_end: f64) -> f64 {
    (span_start + span_end) / 2.0
}

/// Judge scores `s[p][q]` in [1, 5], one row per prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgeMatrix<T> {
    preds: usize,
    golds: usize,
    scores: Vec<T>,
}

impl<T: Scalar> JudgeMatrix<T> {
    pub fn from_rows(rows: Vec<Vec<T>>, golds: usize) -> Result<Self, MetricsError> {
        let preds = rows.len();
        let mut scores = Vec::with_capacity(preds * golds);
        for row in rows {
            if row.len() != golds {
                return Err(MetricsError::DimensionMismatch {
                    rows: preds,
                    cols: row.len(),
                    preds,
                    golds,
                });
            }
            for s in row {
                if !(s >= T::one() && s <= T::from_count(5)) {
                    return Err(MetricsError::JudgeOutOfRange(s.to_f64_lossy()));
                }
                scores.push(s);
            }
        }
        Ok(Self {
            preds,
            golds,
            scores,
        })
    }

    /// Scores every (prediction, gold) pair with `judge`.
    pub fn from_judge(
        preds: &[PredAnswer],
        golds: &[GoldAnswer],
        judge: &dyn Judge,
    ) -> Result<Self, MetricsError> {
        let rows = preds
            .iter()
            .map(|p| {
                golds
                    .iter()
                    .map(|g| judge.judge(&p.text, &g.text).map(|s| T::from_count(s.into())))
                    .collect()
            })
            .collect::<Result<Vec<Vec<T>>, _>>()?;
        Self::from_rows(rows, golds.len())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.preds, self.golds)
    }

    pub fn get(&self, p: usize, q: usize) -> T {
        self.scores[p * self.golds + q]
    }
}

/// Mean over gold answers of the mean judge score of predictions timed
/// inside the gold span (closed interval). A gold answer no prediction
/// falls into scores 1.
pub fn in_span_score<T: Scalar>(
    preds: &[PredAnswer],
    golds: &[GoldAnswer],
    s: &JudgeMatrix<T>,
) -> Result<T, MetricsError> {
    if golds.is_empty() {
        return Err(MetricsError::EmptyGold);
    }
    if s.dims() != (preds.len(), golds.len()) {
        let (rows, cols) = s.dims();
        return Err(MetricsError::DimensionMismatch {
            rows,
            cols,
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let total: T = golds
        .iter()
        .enumerate()
        .map(|(q, gold)| {
            let (sum, n) = preds
                .iter()
                .enumerate()
                .filter(|(_, p)| p.in_span(gold))
                .fold((T::zero(), 0usize), |(sum, n), (p, _)| (sum + s.get(p, q), n + 1));
            if n == 0 {
                T::one()
            } else {
                sum / T::from_count(n)
            }
        })
        .sum();
    Ok(total / T::from_count(golds.len()))
}

/// Judge scores of an untimed prediction against every gold answer, i.e.
/// its contribution to each gold's candidate set.
pub fn pair_untimed_prediction<T: Scalar>(
    pred_text: &str,
    golds: &[GoldAnswer],
    judge: &dyn Judge,
) -> Result<Vec<T>, MetricsError> {
    if golds.is_empty() {
        return Err(MetricsError::EmptyGold);
    }
    golds
        .iter()
        .map(|g| judge.judge(pred_text, &g.text).map(|s| T::from_count(s.into())))
        .collect()
}

/// Scores a predicted answer against a gold answer on the 1..=5 scale.
pub trait Judge: Sync {
    fn judge(&self, pred: &str, gold: &str) -> Result<u8, MetricsError>;
}

/// Deterministic token-overlap judge.
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapJudge;

impl Judge for OverlapJudge {
    fn judge(&self, pred: &str, gold: &str) -> Result<u8, MetricsError> {
        Ok(overlap_judge(pred, gold))
    }
}

/// Token-level F1 between lowercased whitespace tokens (multiset overlap).
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let pred: Vec<String> = pred.split_whitespace().map(str::to_lowercase).collect();
    let gold: Vec<String> = gold.split_whitespace().map(str::to_lowercase).collect();
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in &gold {
        *counts.entry(tok).or_default() += 1;
    }
    let mut common = 0usize;
    for tok in &pred {
        if let Some(c) = counts.get_mut(tok.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token F1 bucketed onto 1..=5.
pub fn overlap_judge(pred_text: &str, gold_text: &str) -> u8 {
    match token_f1(pred_text, gold_text) {
        f if f <= 0.0 => 1,
        f if f <= 0.25 => 2,
        f if f <= 0.5 => 3,
        f if f <= 0.75 => 4,
        _ => 5,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgementRecord {
    pub pred: String,
    pub gold: String,
    pub score: u8,
}

/// Replays judgements produced offline, one JSON object per line:
/// `{"pred":..,"gold":..,"score":1..5}`.
#[derive(Debug, Clone, Default)]
pub struct CachedJudge {
    table: HashMap<(String, String), u8>,
}

impl CachedJudge {
    pub fn from_records(records: impl IntoIterator<Item = JudgementRecord>) -> Result<Self, MetricsError> {
        let mut table = HashMap::new();
        for r in records {
            if !(1..=5).contains(&r.score) {
                return Err(MetricsError::JudgeOutOfRange(r.score.into()));
            }
            table.insert((r.pred, r.gold), r.score);
        }
        Ok(Self { table })
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self, MetricsError> {
        Self::from_records(read_jsonl::<JudgementRecord>(reader)?)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Judge for CachedJudge {
    fn judge(&self, pred: &str, gold: &str) -> Result<u8, MetricsError> {
        self.table
            .get(&(pred.to_owned(), gold.to_owned()))
            .copied()
            .ok_or_else(|| MetricsError::MissingJudgement {
                pred: pred.to_owned(),
                gold: gold.to_owned(),
            })
    }
}

/// Parses JSON Lines, skipping blank lines.
pub fn read_jsonl<R: for<'de> Deserialize<'de>>(reader: impl BufRead) -> Result<Vec<R>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| MetricsError::Json {
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSpan {
    pub start: f64,
    pub end: f64,
    pub caption: String,
}

impl StepSpan {
    pub fn new(start: f64, end: f64, caption: impl Into<String>) -> Self {
        Self {
            start,
            end,
            caption: caption.into(),
        }
    }
}

/// Step `i` runs from the previous response (or 0) to response `i`, then
/// adjacent steps with the same trimmed caption are merged.
pub fn derive_caption_spans(model_turns: &[TimedMessage]) -> Vec<StepSpan> {
    let mut prev = 0.0;
    let raw: Vec<StepSpan> = model_turns
        .iter()
        .map(|m| {
            let span = StepSpan::new(prev, m.time, m.text.clone());
            prev = m.time;
            span
        })
        .collect();
    merge_adjacent_spans(&raw)
}

/// Merges runs of adjacent spans whose trimmed captions are equal, keeping
/// the first caption and covering the whole run.
pub fn merge_adjacent_spans(spans: &[StepSpan]) -> Vec<StepSpan> {
    let mut out: Vec<StepSpan> = Vec::with_capacity(spans.len());
    for span in spans {
        match out.last_mut() {
            Some(last) if last.caption.trim() == span.caption.trim() => last.end = span.end,
            _ => out.push(span.clone()),
        }
    }
    out
}

/// Temporal IoU of two closed intervals. Two zero-length spans have IoU 1
/// when they coincide and 0 otherwise.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Greedy one-to-one matching by descending IoU; returns the number of
/// pairs with IoU at or above `threshold`.
pub fn greedy_matches(pred: &[StepSpan], gold: &[StepSpan], threshold: f64) -> usize {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(pred.len() * gold.len());
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gold.iter().enumerate() {
            let iou = temporal_iou((p.start, p.end), (g.start, g.end));
            if iou >= threshold {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; pred.len()];
    let mut gold_used = vec![false; gold.len()];
    let mut matches = 0;
    for (_, i, j) in pairs {
        if !pred_used[i] && !gold_used[j] {
            pred_used[i] = true;
            gold_used[j] = true;
            matches += 1;
        }
    }
    matches
}

/// Span F1 averaged over `thresholds`.
pub fn captioning_f1<T: Scalar>(pred: &[StepSpan], gold: &[StepSpan], thresholds: &[f64]) -> T {
    if thresholds.is_empty() {
        return T::zero();
    }
    let total: T = thresholds
        .iter()
        .map(|&thr| {
            if pred.is_empty() || gold.is_empty() {
                return T::zero();
            }
            let m = greedy_matches(pred, gold, thr);
            if m == 0 {
                return T::zero();
            }
            let precision = T::from_count(m) / T::from_count(pred.len());
            let recall = T::from_count(m) / T::from_count(gold.len());
            let two = T::from_count(2);
            two * precision * recall / (precision + recall)
        })
        .sum();
    total / T::from_count(thresholds.len())
}

/// Indices of frames whose timestamp lies in `[start, end]`.
pub fn span_frames(span: (f64, f64), timeline: &FrameTimeline) -> BTreeSet<usize> {
    timeline
        .frames
        .iter()
        .enumerate()
        .filter(|(_, f)| f.timestamp >= span.0 && f.timestamp <= span.1)
        .map(|(i, _)| i)
        .collect()
}

/// `|a ∩ b| / |a ∪ b|`, 0 when both are empty.
pub fn frame_iou<T: Scalar>(pred: &BTreeSet<usize>, gold: &BTreeSet<usize>) -> T {
    let inter = pred.intersection(gold).count();
    let union = pred.len() + gold.len() - inter;
    if union == 0 {
        return T::zero();
    }
    T::from_count(inter) / T::from_count(union)
}

/// Fraction of queries whose IoU reaches `threshold`; 0 with no queries.
pub fn recall_at<T: Scalar>(ious: &[T], threshold: T) -> T {
    if ious.is_empty() {
        return T::zero();
    }
    let hits = ious.iter().filter(|&&iou| iou >= threshold).count();
    T::from_count(hits) / T::from_count(ious.len())
}

/// Frames classified relevant: optionally smoothed (`w > 0`) and min-max
/// normalized relevance at or above `threshold`.
pub fn classify_relevant<T: Scalar>(
    relevance: &[T],
    w: usize,
    normalize: bool,
    threshold: T,
) -> BTreeSet<usize> {
    let mut scores = crate::policy::smooth(relevance, w);
    if normalize {
        // Only empty input fails, and that yields no frames either way.
        scores = crate::policy::minmax_normalize(&scores).unwrap_or_default();
    }
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Clip indices sorted by descending score, ties by lower index.
pub fn rank_clips<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

fn check_indices<T>(scores: &[T], gold: &BTreeSet<usize>) -> Result<(), MetricsError> {
    match gold.iter().find(|&&i| i >= scores.len()) {
        Some(&index) => Err(MetricsError::IndexOutOfRange {
            index,
            len: scores.len(),
        }),
        None => Ok(()),
    }
}

/// Average precision of the ranking induced by `scores`; 0 when `gold` is empty.
pub fn highlight_ap<T: Scalar>(scores: &[T], gold: &BTreeSet<usize>) -> Result<T, MetricsError> {
    check_indices(scores, gold)?;
    if gold.is_empty() {
        return Ok(T::zero());
    }
    let mut hits = 0usize;
    let mut total = T::zero();
    for (rank, clip) in rank_clips(scores).into_iter().enumerate() {
        if gold.contains(&clip) {
            hits += 1;
            total = total + T::from_count(hits) / T::from_count(rank + 1);
        }
    }
    Ok(total / T::from_count(gold.len()))
}

/// 1 when the top-ranked clip is relevant, else 0 (also 0 with no clips).
pub fn hit_at_1<T: Scalar>(scores: &[T], gold: &BTreeSet<usize>) -> Result<T, MetricsError> {
    check_indices(scores, gold)?;
    Ok(match rank_clips(scores).first() {
        Some(top) if gold.contains(top) => T::one(),
        _ => T::zero(),
    })
}

/// Collapses runs of consecutive turns with identical trimmed text,
/// keeping the first of each run.
pub fn dedup_turns(turns: &[TimedMessage]) -> Vec<TimedMessage> {
    let mut out: Vec<TimedMessage> = Vec::with_capacity(turns.len());
    for turn in turns {
        if out.last().is_none_or(|last| last.text.trim() != turn.text.trim()) {
            out.push(turn.clone());
        }
    }
    out
}
