//! Reformatting segment-level annotations into duet training examples.
//!
//! Each caption (or MAGQA answer) becomes an assistant turn inserted at a
//! random point between 50% and 75% of its segment, snapped to just after
//! the last frame at or before that point. Frames from the segment midpoint
//! up to the insertion time are labelled informative. Grounding examples
//! put the query first and label frames inside the relevant spans.
//!
//! Randomness comes from [`DuetRng`], a ChaCha8 stream seeded per example
//! from `(seed, source_id)`, so every example is reproducible on its own.

use std::io::{BufRead, Write};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::FrameTimeline;
use crate::prompts;
use crate::transcript::{DuetTranscript, FrameRef, TranscriptError, Turn};

/// Identifier of the random-number contract, recorded in every example.
pub const RNG_ALGORITHM: &str = "chacha8/seed_from_u64(seed^fnv1a64(source_id))/u53";

/// Answers with exactly this text are dropped from MAGQA sources.
pub const NOT_MENTIONED: &str = "Not Mentioned.";

const INSERT_LO: f64 = 0.5;
const INSERT_HI: f64 = 0.75;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("video yields no frames (duration {duration}s at {fps} fps)")]
    NoFrames { duration: f64, fps: f64 },
    #[error("no answers left after filtering")]
    NoAnswers,
    #[error("invalid segment [{start}, {end}]")]
    InvalidSegment { start: f64, end: f64 },
    #[error("span [{start}, {end}] is outside [0, {duration}]")]
    InvalidSpan { start: f64, end: f64, duration: f64 },
    #[error("invalid sampling spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
    #[error("line {line}: {source}")]
    Input {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Seeded 64-bit generator with an explicit float mapping so that other
/// implementations can reproduce the draws.
#[derive(Debug, Clone)]
pub struct DuetRng(ChaCha8Rng);

impl DuetRng {
    pub fn from_seed(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn for_example(seed: u64, source_id: &str) -> Self {
        Self::from_seed(seed ^ fnv1a64(source_id.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform on the closed interval [0, 1].
    pub fn unit_closed(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / ((1u64 << 53) - 1) as f64
    }

    /// Uniform on [0, 1).
    pub fn unit_half_open(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform index below `n` (`n > 0`).
    pub fn index_below(&mut self, n: usize) -> usize {
        ((self.unit_half_open() * n as f64) as usize).min(n - 1)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub start: f64,
    pub end: f64,
    pub caption: String,
}

impl SegmentAnnotation {
    pub fn new(start: f64, end: f64, caption: impl Into<String>) -> Self {
        Self {
            start,
            end,
            caption: caption.into(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn midpoint(&self) -> f64 {
        self.start + 0.5 * (self.end - self.start)
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.start >= 0.0 && self.start <= self.end && self.end.is_finite() {
            Ok(())
        } else {
            Err(DatasetError::InvalidSegment {
                start: self.start,
                end: self.end,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagqaAnswer {
    pub start: f64,
    pub end: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagqaSource {
    pub question: String,
    pub answers: Vec<MagqaAnswer>,
}

impl MagqaSource {
    /// Answers that survive the "Not Mentioned." filter, sorted by start.
    pub fn retained_answers(&self) -> Vec<SegmentAnnotation> {
        let mut kept: Vec<_> = self
            .answers
            .iter()
            .filter(|a| a.text != NOT_MENTIONED)
            .map(|a| SegmentAnnotation::new(a.start, a.end, a.text.clone()))
            .collect();
        kept.sort_by(|a, b| a.start.total_cmp(&b.start));
        kept
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverflowMode {
    /// Keep the first `max_frames` frames and drop later turns.
    #[serde(rename = "truncate")]
    TruncateHead,
    /// Keep `max_frames` frames evenly spread over the whole video.
    #[serde(rename = "uniform")]
    UniformResample,
}

impl std::str::FromStr for OverflowMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "truncate" => Ok(Self::TruncateHead),
            "uniform" => Ok(Self::UniformResample),
            other => Err(format!("unknown overflow mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub fps: f64,
    pub max_frames: usize,
    pub overflow: OverflowMode,
}

impl SamplingSpec {
    pub fn new(fps: f64, max_frames: usize, overflow: OverflowMode) -> Self {
        Self {
            fps,
            max_frames,
            overflow,
        }
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(DatasetError::BadSpec(format!("fps must be > 0, got {}", self.fps)));
        }
        if self.max_frames == 0 {
            return Err(DatasetError::BadSpec("max_frames must be >= 1".into()));
        }
        Ok(())
    }

    fn base_count(&self, duration: f64) -> usize {
        if !(duration > 0.0) {
            return 0;
        }
        // Closed form, then nudge across rounding at the boundary.
        let mut n = (duration * self.fps).ceil().max(0.0) as usize;
        while n > 0 && ((n - 1) as f64) / self.fps >= duration {
            n -= 1;
        }
        while (n as f64) / self.fps < duration {
            n += 1;
        }
        n
    }

    /// Timestamp of the first discarded frame when head truncation applies.
    pub fn truncation_cutoff(&self, duration: f64) -> Option<f64> {
        (self.overflow == OverflowMode::TruncateHead && self.base_count(duration) > self.max_frames)
            .then(|| self.max_frames as f64 / self.fps)
    }
}

/// Frames at `k / fps` for every `k` with `k / fps < duration`, capped at
/// `max_frames` according to the overflow mode. Frame indices are the
/// ordinal within the returned timeline; payload ids carry the base index.
pub fn sample_frame_timeline(
    video_id: &str,
    duration: f64,
    spec: &SamplingSpec,
) -> Result<FrameTimeline, DatasetError> {
    spec.validate()?;
    let n = spec.base_count(duration);
    let base: Vec<usize> = if n <= spec.max_frames {
        (0..n).collect()
    } else {
        match spec.overflow {
            OverflowMode::TruncateHead => (0..spec.max_frames).collect(),
            OverflowMode::UniformResample => uniform_indices(n, spec.max_frames),
        }
    };
    let frames = base
        .into_iter()
        .enumerate()
        .map(|(ordinal, k)| {
            FrameRef::new(ordinal, k as f64 / spec.fps, format!("{video_id}/{k:06}"))
        })
        .collect();
    Ok(FrameTimeline {
        fps: spec.fps,
        frames,
    })
}

/// `m` indices over `0..n`, `floor(i * (n - 1) / (m - 1))`, first and last included.
fn uniform_indices(n: usize, m: usize) -> Vec<usize> {
    if m == 1 {
        return vec![0];
    }
    (0..m).map(|i| i * (n - 1) / (m - 1)).collect()
}

/// Draws an insertion time uniformly from [50%, 75%] of the segment.
pub fn choose_insertion_time(seg: &SegmentAnnotation, rng: &mut DuetRng) -> f64 {
    let u = INSERT_LO + (INSERT_HI - INSERT_LO) * rng.unit_closed();
    seg.start + u * (seg.end - seg.start)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLabel {
    pub informative: bool,
    pub relevance: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Dense,
    Magqa,
    Grounding,
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense" => Ok(Self::Dense),
            "magqa" => Ok(Self::Magqa),
            "grounding" => Ok(Self::Grounding),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngInfo {
    pub algorithm: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub source_id: String,
    pub task: Task,
    pub fps: f64,
    pub transcript: DuetTranscript,
    /// One label per frame in the transcript's stream turns.
    pub frame_labels: Vec<FrameLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    /// Captions or answers that made it into the transcript, with their
    /// source segments, in insertion order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answers: Vec<SegmentAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng: Option<RngInfo>,
}

/// A caption with its drawn insertion time.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub segment: SegmentAnnotation,
    pub insertion_time: f64,
}

fn last_frame_at_or_before(timeline: &FrameTimeline, t: f64) -> Option<usize> {
    timeline.frames.iter().rposition(|f| f.timestamp <= t)
}

fn check_frames(duration: f64, spec: &SamplingSpec) -> Result<(), DatasetError> {
    spec.validate()?;
    if !(duration > 0.0) || duration * spec.fps < 1.0 {
        return Err(DatasetError::NoFrames {
            duration,
            fps: spec.fps,
        });
    }
    Ok(())
}

/// Lays out system prompt, user turns (placed before a frame) and assistant
/// turns (placed after a frame) around the timeline. Several assistant
/// texts landing after the same frame are joined with a space.
fn assemble(
    timeline: &FrameTimeline,
    users_before: &[(usize, String)],
    assistants_after: &[(usize, String)],
) -> Result<DuetTranscript, DatasetError> {
    let mut transcript = DuetTranscript::new().with(Turn::system(prompts::system_prompt()))?;
    for (k, frame) in timeline.frames.iter().enumerate() {
        for (_, text) in users_before.iter().filter(|(at, _)| *at == k) {
            transcript.push(Turn::user(text.clone(), frame.timestamp))?;
        }
        transcript.push_frame(frame.clone())?;
        let texts: Vec<&str> = assistants_after
            .iter()
            .filter(|(at, _)| *at == k)
            .map(|(_, t)| t.as_str())
            .collect();
        if !texts.is_empty() {
            transcript.push(Turn::assistant(texts.join(" "), frame.timestamp))?;
        }
    }
    Ok(transcript)
}

/// Captions placed on a timeline: kept placements (sorted by insertion time,
/// ties by segment start), the frame each follows, and informative labels.
struct CaptionLayout {
    kept: Vec<Placement>,
    after_frame: Vec<usize>,
    labels: Vec<FrameLabel>,
}

fn layout_captions(
    timeline: &FrameTimeline,
    cutoff: Option<f64>,
    placements: &[Placement],
) -> CaptionLayout {
    let mut kept: Vec<Placement> = placements
        .iter()
        .filter(|p| cutoff.is_none_or(|c| p.insertion_time < c))
        .filter(|p| last_frame_at_or_before(timeline, p.insertion_time).is_some())
        .cloned()
        .collect();
    kept.sort_by(|a, b| {
        a.insertion_time
            .total_cmp(&b.insertion_time)
            .then(a.segment.start.total_cmp(&b.segment.start))
    });
    let after_frame = kept
        .iter()
        .map(|p| last_frame_at_or_before(timeline, p.insertion_time).expect("filtered above"))
        .collect();
    let labels = timeline
        .frames
        .iter()
        .map(|f| FrameLabel {
            informative: kept.iter().any(|p| {
                f.timestamp >= p.segment.midpoint() && f.timestamp <= p.insertion_time
            }),
            relevance: false,
        })
        .collect();
    CaptionLayout {
        kept,
        after_frame,
        labels,
    }
}

/// Dense-captioning layout with insertion times already drawn.
pub fn assemble_dense_caption(
    source_id: &str,
    duration: f64,
    spec: &SamplingSpec,
    prompt: &str,
    placements: &[Placement],
) -> Result<TrainingExample, DatasetError> {
    check_frames(duration, spec)?;
    let timeline = sample_frame_timeline(source_id, duration, spec)?;
    let layout = layout_captions(&timeline, spec.truncation_cutoff(duration), placements);
    let assistants: Vec<(usize, String)> = layout
        .after_frame
        .iter()
        .zip(&layout.kept)
        .map(|(&k, p)| (k, p.segment.caption.clone()))
        .collect();
    let transcript = assemble(&timeline, &[(0, prompt.to_owned())], &assistants)?;
    Ok(TrainingExample {
        source_id: source_id.to_owned(),
        task: Task::Dense,
        fps: spec.fps,
        transcript,
        frame_labels: layout.labels,
        question: None,
        answers: layout.kept.into_iter().map(|p| p.segment).collect(),
        rng: None,
    })
}

pub fn build_dense_caption_example(
    source_id: &str,
    segments: &[SegmentAnnotation],
    duration: f64,
    spec: &SamplingSpec,
    prompt: &str,
    rng: &mut DuetRng,
) -> Result<TrainingExample, DatasetError> {
    for seg in segments {
        seg.validate()?;
    }
    let placements: Vec<Placement> = segments
        .iter()
        .map(|seg| Placement {
            segment: seg.clone(),
            insertion_time: choose_insertion_time(seg, rng),
        })
        .collect();
    assemble_dense_caption(source_id, duration, spec, prompt, &placements)
}

/// MAGQA layout with the answer insertion times and the raw question time
/// already drawn. The question is snapped down to the last frame at or
/// before `question_time` and placed before that frame.
pub fn assemble_magqa(
    source_id: &str,
    question: &str,
    duration: f64,
    spec: &SamplingSpec,
    placements: &[Placement],
    question_time: f64,
) -> Result<TrainingExample, DatasetError> {
    check_frames(duration, spec)?;
    let timeline = sample_frame_timeline(source_id, duration, spec)?;
    let layout = layout_captions(&timeline, spec.truncation_cutoff(duration), placements);
    if layout.kept.is_empty() {
        return Err(DatasetError::NoAnswers);
    }
    let q_frame = last_frame_at_or_before(&timeline, question_time).unwrap_or(0);
    let assistants: Vec<(usize, String)> = layout
        .after_frame
        .iter()
        .zip(&layout.kept)
        .map(|(&k, p)| (k, p.segment.caption.clone()))
        .collect();
    let transcript = assemble(&timeline, &[(q_frame, question.to_owned())], &assistants)?;
    Ok(TrainingExample {
        source_id: source_id.to_owned(),
        task: Task::Magqa,
        fps: spec.fps,
        transcript,
        frame_labels: layout.labels,
        question: Some(question.to_owned()),
        answers: layout.kept.into_iter().map(|p| p.segment).collect(),
        rng: None,
    })
}

pub fn build_magqa_example(
    source_id: &str,
    src: &MagqaSource,
    duration: f64,
    spec: &SamplingSpec,
    rng: &mut DuetRng,
) -> Result<TrainingExample, DatasetError> {
    let answers = src.retained_answers();
    if answers.is_empty() {
        return Err(DatasetError::NoAnswers);
    }
    for a in &answers {
        a.validate()?;
    }
    let placements: Vec<Placement> = answers
        .iter()
        .map(|seg| Placement {
            segment: seg.clone(),
            insertion_time: choose_insertion_time(seg, rng),
        })
        .collect();
    let cutoff = spec.truncation_cutoff(duration);
    let first = placements
        .iter()
        .map(|p| p.insertion_time)
        .filter(|&t| cutoff.is_none_or(|c| t < c))
        .fold(f64::INFINITY, f64::min);
    let u = rng.unit_half_open();
    let question_time = if first.is_finite() { u * first } else { 0.0 };
    assemble_magqa(source_id, &src.question, duration, spec, &placements, question_time)
}

pub fn build_grounding_example(
    source_id: &str,
    query: &str,
    relevant_spans: &[(f64, f64)],
    duration: f64,
    spec: &SamplingSpec,
    prompt_pool: &[String],
    rng: &mut DuetRng,
) -> Result<TrainingExample, DatasetError> {
    check_frames(duration, spec)?;
    for &(start, end) in relevant_spans {
        if !(start >= 0.0 && start <= end && end <= duration) {
            return Err(DatasetError::InvalidSpan {
                start,
                end,
                duration,
            });
        }
    }
    let prompt = match prompt_pool {
        [] => prompts::QUERY_SLOT,
        pool => pool[rng.index_below(pool.len())].as_str(),
    };
    let text = prompts::format_grounding(prompt, query);
    let timeline = sample_frame_timeline(source_id, duration, spec)?;
    let labels = timeline
        .frames
        .iter()
        .map(|f| FrameLabel {
            informative: false,
            relevance: relevant_spans
                .iter()
                .any(|&(s, e)| f.timestamp >= s && f.timestamp <= e),
        })
        .collect();
    let transcript = assemble(&timeline, &[(0, text)], &[])?;
    Ok(TrainingExample {
        source_id: source_id.to_owned(),
        task: Task::Grounding,
        fps: spec.fps,
        transcript,
        frame_labels: labels,
        question: Some(query.to_owned()),
        answers: Vec::new(),
        rng: None,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DatasetStats {
    pub num_examples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answers_per_video: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub words_per_question: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub words_per_answer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_segment_len: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn word_count(text: &str) -> f64 {
    text.split_whitespace().count() as f64
}

pub fn dataset_stats(examples: &[TrainingExample]) -> DatasetStats {
    if examples.is_empty() {
        return DatasetStats::default();
    }
    let answers = || examples.iter().flat_map(|e| &e.answers);
    DatasetStats {
        num_examples: examples.len(),
        answers_per_video: mean(examples.iter().map(|e| e.answers.len() as f64)),
        words_per_question: mean(
            examples
                .iter()
                .filter_map(|e| e.question.as_deref())
                .map(word_count),
        ),
        words_per_answer: mean(answers().map(|a| word_count(&a.caption))),
        mean_segment_len: mean(answers().map(SegmentAnnotation::duration)),
    }
}

#[derive(Debug, Clone, Deserialize)]
struct DenseRecord {
    video_id: String,
    duration: f64,
    segments: Vec<SegmentAnnotation>,
}

#[derive(Debug, Clone, Deserialize)]
struct MagqaRecord {
    video_id: String,
    duration: f64,
    question: String,
    answers: Vec<MagqaAnswer>,
}

#[derive(Debug, Clone, Deserialize)]
struct GroundingRecord {
    video_id: String,
    duration: f64,
    query: String,
    spans: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
enum SourceRecord {
    Dense(DenseRecord),
    Magqa(MagqaRecord),
    Grounding(GroundingRecord),
}

impl SourceRecord {
    fn video_id(&self) -> &str {
        match self {
            Self::Dense(r) => &r.video_id,
            Self::Magqa(r) => &r.video_id,
            Self::Grounding(r) => &r.video_id,
        }
    }

    fn build(&self, spec: &SamplingSpec, seed: u64) -> Result<TrainingExample, DatasetError> {
        let mut rng = DuetRng::for_example(seed, self.video_id());
        let mut example = match self {
            Self::Dense(r) => {
                let pool = prompts::dense_captioning_prompts();
                let prompt = &pool[rng.index_below(pool.len())];
                build_dense_caption_example(&r.video_id, &r.segments, r.duration, spec, prompt, &mut rng)
            }
            Self::Magqa(r) => {
                let src = MagqaSource {
                    question: r.question.clone(),
                    answers: r.answers.clone(),
                };
                build_magqa_example(&r.video_id, &src, r.duration, spec, &mut rng)
            }
            Self::Grounding(r) => build_grounding_example(
                &r.video_id,
                &r.query,
                &r.spans,
                r.duration,
                spec,
                prompts::grounding_prompts(),
                &mut rng,
            ),
        }?;
        example.rng = Some(RngInfo {
            algorithm: RNG_ALGORITHM.to_owned(),
            seed,
        });
        Ok(example)
    }
}

#[derive(Debug, Default)]
pub struct BuildReport {
    pub examples: Vec<TrainingExample>,
    /// `(video_id, reason)` for every input record that produced no example.
    pub skipped: Vec<(String, String)>,
}

/// Builds examples from JSON Lines input. Records are processed in parallel
/// and returned in input order.
pub fn build_dataset(
    task: Task,
    input: impl BufRead,
    spec: &SamplingSpec,
    seed: u64,
) -> Result<BuildReport, DatasetError> {
    spec.validate()?;
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |source| DatasetError::Input { line: i + 1, source };
        let record = match task {
            Task::Dense => SourceRecord::Dense(serde_json::from_str(&line).map_err(parse_err)?),
            Task::Magqa => SourceRecord::Magqa(serde_json::from_str(&line).map_err(parse_err)?),
            Task::Grounding => {
                SourceRecord::Grounding(serde_json::from_str(&line).map_err(parse_err)?)
            }
        };
        records.push(record);
    }
    let results: Vec<_> = records.par_iter().map(|r| r.build(spec, seed)).collect();
    let mut report = BuildReport::default();
    for (record, result) in records.iter().zip(results) {
        match result {
            Ok(example) => report.examples.push(example),
            Err(e) => report.skipped.push((record.video_id().to_owned(), e.to_string())),
        }
    }
    Ok(report)
}

pub fn write_examples(examples: &[TrainingExample], mut out: impl Write) -> std::io::Result<()> {
    for example in examples {
        serde_json::to_writer(&mut out, example)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(fps: f64) -> SamplingSpec {
        SamplingSpec::new(fps, 120, OverflowMode::TruncateHead)
    }

    fn informative_times(ex: &TrainingExample) -> Vec<f64> {
        ex.transcript
            .frames()
            .zip(&ex.frame_labels)
            .filter(|(_, l)| l.informative)
            .map(|(f, _)| f.timestamp)
            .collect()
    }

    #[test]
    fn insertion_time_range() {
        let mut rng = DuetRng::from_seed(7);
        let seg = SegmentAnnotation::new(10.0, 18.0, "c");
        for _ in 0..1000 {
            let t = choose_insertion_time(&seg, &mut rng);
            assert!((14.0..=16.0).contains(&t), "{t}");
        }
        let point = SegmentAnnotation::new(5.0, 5.0, "c");
        assert_eq!(choose_insertion_time(&point, &mut rng), 5.0);
    }

    #[test]
    fn seeded_insertion_is_frozen() {
        let mut rng = DuetRng::from_seed(42);
        let t = choose_insertion_time(&SegmentAnnotation::new(0.0, 4.0, "c"), &mut rng);
        let raw = ChaCha8Rng::seed_from_u64(42).next_u64();
        let u = (raw >> 11) as f64 / 9_007_199_254_740_991.0;
        assert_eq!(t, 4.0 * (0.5 + 0.25 * u));
        assert_eq!(t.to_bits(), 4613221512146176747, "{t}");
    }

    #[test]
    fn dense_caption_layout_example() {
        let placements = [Placement {
            segment: SegmentAnnotation::new(0.0, 8.0, "boil water"),
            insertion_time: 5.0,
        }];
        let ex = assemble_dense_caption("v", 8.0, &spec(0.5), "narrate", &placements).unwrap();
        assert_eq!(
            ex.transcript.frames().map(|f| f.timestamp).collect::<Vec<_>>(),
            [0.0, 2.0, 4.0, 6.0]
        );
        assert_eq!(informative_times(&ex), [4.0]);
        let roles: Vec<_> = ex.transcript.turns().iter().map(|t| t.role.as_str()).collect();
        assert_eq!(roles, ["system", "user", "stream", "assistant", "stream"]);
        assert_eq!(ex.transcript.turns()[2].frames().len(), 3);
        assert_eq!(ex.transcript.turns()[3].emit_time, Some(4.0));
    }

    #[test]
    fn no_segments_gives_single_stream() {
        let mut rng = DuetRng::from_seed(1);
        let ex = build_dense_caption_example("v", &[], 5.0, &spec(1.0), "p", &mut rng).unwrap();
        assert_eq!(ex.transcript.len(), 3);
        assert!(ex.frame_labels.iter().all(|l| !l.informative && !l.relevance));
        assert!(matches!(
            build_dense_caption_example("v", &[], 0.5, &spec(1.0), "p", &mut rng),
            Err(DatasetError::NoFrames { .. })
        ));
    }

    #[test]
    fn truncation_drops_late_captions() {
        let placements = [
            Placement {
                segment: SegmentAnnotation::new(20.0, 40.0, "early"),
                insertion_time: 32.0,
            },
            Placement {
                segment: SegmentAnnotation::new(100.0, 140.0, "late"),
                insertion_time: 125.0,
            },
        ];
        let ex = assemble_dense_caption("v", 300.0, &spec(2.0), "p", &placements).unwrap();
        let times: Vec<f64> = ex.transcript.frames().map(|f| f.timestamp).collect();
        assert_eq!(times.len(), 120);
        assert_eq!(*times.last().unwrap(), 59.5);
        assert_eq!(ex.answers.len(), 1);
        assert_eq!(ex.answers[0].caption, "early");
        assert_eq!(ex.frame_labels.len(), 120);
    }

    #[test]
    fn sampling_examples() {
        let t = sample_frame_timeline("v", 10.0, &spec(2.0)).unwrap();
        assert_eq!(t.len(), 20);
        assert_eq!(t.frames[19].timestamp, 9.5);

        let t = sample_frame_timeline("v", 300.0, &spec(2.0)).unwrap();
        assert_eq!(t.len(), 120);
        assert_eq!(t.frames[119].timestamp, 59.5);

        let uniform = SamplingSpec::new(0.5, 400, OverflowMode::UniformResample);
        let t = sample_frame_timeline("v", 900.0, &uniform).unwrap();
        assert_eq!(t.len(), 400);
        assert_eq!(t.frames[0].timestamp, 0.0);
        assert_eq!(t.frames[399].timestamp, 898.0);
        assert_eq!(t.frames[399].payload_id, "v/000449");
        assert!(t.validate().is_ok());
    }

    #[test]
    fn overlapping_captions_union_and_order() {
        let placements = [
            Placement {
                segment: SegmentAnnotation::new(0.0, 8.0, "a"),
                insertion_time: 5.0,
            },
            Placement {
                segment: SegmentAnnotation::new(2.0, 8.0, "b"),
                insertion_time: 5.0,
            },
            Placement {
                segment: SegmentAnnotation::new(4.0, 10.0, "c"),
                insertion_time: 8.5,
            },
        ];
        let ex = assemble_dense_caption("v", 10.0, &spec(1.0), "p", &placements).unwrap();
        assert_eq!(informative_times(&ex), [4.0, 5.0, 7.0, 8.0]);
        let texts: Vec<_> = ex.transcript.turns().iter().filter(|t| t.role.as_str() == "assistant").map(|t| t.text().unwrap().to_owned()).collect();
        assert_eq!(texts, ["a b", "c"]);
    }

    #[test]
    fn magqa_question_precedes_first_answer() {
        let src = MagqaSource {
            question: "What does the player do?".into(),
            answers: vec![MagqaAnswer {
                start: 4.0,
                end: 8.0,
                text: "He shoots.".into(),
            }],
        };
        for seed in 0..50 {
            let mut rng = DuetRng::from_seed(seed);
            let ex = build_magqa_example("v", &src, 10.0, &spec(1.0), &mut rng).unwrap();
            let turns = ex.transcript.turns();
            let user = turns.iter().position(|t| t.role.as_str() == "user").unwrap();
            let asst = turns.iter().position(|t| t.role.as_str() == "assistant").unwrap();
            assert!(user < asst);
            let t_ans = turns[asst].emit_time.unwrap();
            assert!((6.0..=7.0).contains(&t_ans));
            assert!(turns[user].emit_time.unwrap() <= t_ans);
        }
    }

    #[test]
    fn magqa_filtering_and_truncation() {
        let src = MagqaSource {
            question: "q".into(),
            answers: vec![
                MagqaAnswer {
                    start: 2.0,
                    end: 4.0,
                    text: "first".into(),
                },
                MagqaAnswer {
                    start: 100.0,
                    end: 104.0,
                    text: "second".into(),
                },
                MagqaAnswer {
                    start: 5.0,
                    end: 6.0,
                    text: NOT_MENTIONED.into(),
                },
            ],
        };
        let mut rng = DuetRng::from_seed(3);
        let ex = build_magqa_example("v", &src, 200.0, &spec(2.0), &mut rng).unwrap();
        assert_eq!(ex.answers.len(), 1);
        assert_eq!(dataset_stats(&[ex]).answers_per_video, Some(1.0));

        let only_nm = MagqaSource {
            question: "q".into(),
            answers: vec![MagqaAnswer {
                start: 0.0,
                end: 1.0,
                text: NOT_MENTIONED.into(),
            }],
        };
        assert!(matches!(
            build_magqa_example("v", &only_nm, 10.0, &spec(1.0), &mut rng),
            Err(DatasetError::NoAnswers)
        ));
    }

    #[test]
    fn grounding_labels() {
        let mut rng = DuetRng::from_seed(0);
        let pool = prompts::grounding_prompts();
        let rel_times = |spans: &[(f64, f64)], rng: &mut DuetRng| {
            let ex = build_grounding_example("v", "q", spans, 10.0, &spec(1.0), pool, rng).unwrap();
            assert!(ex.frame_labels.iter().all(|l| !l.informative));
            ex.transcript
                .frames()
                .zip(&ex.frame_labels)
                .filter(|(_, l)| l.relevance)
                .map(|(f, _)| f.timestamp)
                .collect::<Vec<_>>()
        };
        assert_eq!(rel_times(&[(2.0, 5.0)], &mut rng), [2.0, 3.0, 4.0, 5.0]);
        assert!(rel_times(&[], &mut rng).is_empty());
        assert_eq!(rel_times(&[(1.0, 3.0), (2.0, 4.0)], &mut rng), [1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(
            build_grounding_example("v", "q", &[(5.0, 11.0)], 10.0, &spec(1.0), pool, &mut rng),
            Err(DatasetError::InvalidSpan { .. })
        ));
    }

    #[test]
    fn stats() {
        let mk = |n: usize| TrainingExample {
            source_id: "v".into(),
            task: Task::Magqa,
            fps: 1.0,
            transcript: DuetTranscript::new(),
            frame_labels: vec![],
            question: Some("what is it".into()),
            answers: (0..n)
                .map(|i| SegmentAnnotation::new(i as f64, i as f64 + 4.0, "a b"))
                .collect(),
            rng: None,
        };
        let s = dataset_stats(&[mk(3), mk(4)]);
        assert_eq!(s.num_examples, 2);
        assert_eq!(s.answers_per_video, Some(3.5));
        assert_eq!(s.words_per_question, Some(3.0));
        assert_eq!(s.words_per_answer, Some(2.0));
        assert_eq!(s.mean_segment_len, Some(4.0));
        assert_eq!(dataset_stats(&[]), DatasetStats::default());
    }
}
