//! Multimodal samples, 1D sequence packing and packed-sequence attention masks.

mod generator;
pub mod mask;

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use generator::{GeneratorSpec, LengthRange, ModalityMix};
pub use mask::{compose_masks, mask_nnz, Block, MaskError, MaskSpec};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("sample `{0}` has more tokens than the sequence capacity")]
    SampleTooLarge(String),
    #[error("invalid sample `{id}`: {reason}")]
    InvalidSample { id: String, reason: String },
    #[error("invalid generator #{index}: {reason}")]
    InvalidGenerator { index: usize, reason: String },
    #[error("capacity must be positive")]
    ZeroCapacity,
    #[error("unknown mask policy `{0}`")]
    UnknownPolicy(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    ParseError { line: usize, column: usize, message: String },
    #[error("cannot read workload file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskTag {
    #[default]
    T2v,
    I2v,
    Ref2v,
    Edit,
    Sr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Video,
}

impl Modality {
    pub fn is_visual(self) -> bool {
        !matches!(self, Modality::Text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub text_tokens: u64,
    #[serde(default)]
    pub image_tokens: u64,
    #[serde(default)]
    pub video_tokens: u64,
    #[serde(default)]
    pub task_tag: TaskTag,
    #[serde(default = "unit_weight")]
    pub encoder_weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl Sample {
    pub fn new(id: impl Into<String>, text: u64, image: u64, video: u64) -> Self {
        Self {
            id: id.into(),
            text_tokens: text,
            image_tokens: image,
            video_tokens: video,
            task_tag: TaskTag::T2v,
            encoder_weight: 1.0,
        }
    }

    pub fn total_tokens(&self) -> u64 {
        self.text_tokens + self.image_tokens + self.video_tokens
    }

    /// Encoder cost unit used for pipeline-stage partitioning.
    pub fn encoder_load(&self) -> f64 {
        self.encoder_weight * self.total_tokens() as f64
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let invalid = |reason: &str| WorkloadError::InvalidSample { id: self.id.clone(), reason: reason.into() };
        if self.id.is_empty() {
            return Err(invalid("id must be non-empty"));
        }
        if self.total_tokens() == 0 {
            return Err(invalid("total_tokens must be > 0"));
        }
        if !(self.encoder_weight.is_finite() && self.encoder_weight > 0.0) {
            return Err(invalid("encoder_weight must be finite and > 0"));
        }
        Ok(())
    }

    /// Non-empty modality runs in packing order: text first, then image, then video.
    fn modality_runs(&self) -> impl Iterator<Item = (Modality, u64)> {
        [
            (Modality::Text, self.text_tokens),
            (Modality::Image, self.image_tokens),
            (Modality::Video, self.video_tokens),
        ]
        .into_iter()
        .filter(|(_, n)| *n > 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub sample_id: String,
    pub modality: Modality,
    pub start: usize,
    pub length: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.length
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub capacity: usize,
    pub segments: Vec<Segment>,
    pub padding: usize,
}

impl PackedSequence {
    pub fn used_tokens(&self) -> usize {
        self.capacity - self.padding
    }

    /// Sample ids in placement order.
    pub fn sample_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = Vec::new();
        for seg in &self.segments {
            if ids.last() != Some(&seg.sample_id.as_str()) {
                ids.push(&seg.sample_id);
            }
        }
        ids
    }

    /// Token range and segments of every sample, in placement order.
    pub fn sample_spans(&self) -> Vec<(Range<usize>, &[Segment])> {
        let mut spans = Vec::new();
        let mut i = 0;
        while i < self.segments.len() {
            let mut j = i + 1;
            while j < self.segments.len() && self.segments[j].sample_id == self.segments[i].sample_id {
                j += 1;
            }
            let range = self.segments[i].start..self.segments[j - 1].range().end;
            spans.push((range, &self.segments[i..j]));
            i = j;
        }
        spans
    }

    fn push_sample(&mut self, sample: &Sample) {
        let mut offset = self.used_tokens();
        for (modality, n) in sample.modality_runs() {
            self.segments.push(Segment {
                sample_id: sample.id.clone(),
                modality,
                start: offset,
                length: n as usize,
            });
            offset += n as usize;
        }
        self.padding -= sample.total_tokens() as usize;
    }
}

/// First fit in the given order: each item goes to the first bin with room.
/// Returns each item's bin; `free` ends with the room left in every bin.
/// Items larger than `capacity` still get a bin of their own (with no room).
pub fn first_fit(sizes: &[u64], capacity: u64, free: &mut Vec<u64>) -> Vec<usize> {
    free.clear();
    sizes
        .iter()
        .map(|&need| match free.iter().position(|&room| room >= need) {
            Some(i) => {
                free[i] -= need;
                i
            }
            None => {
                free.push(capacity.saturating_sub(need));
                free.len() - 1
            }
        })
        .collect()
}

/// Packs samples into fixed-capacity sequences with first-fit-decreasing.
///
/// Samples are sorted by total tokens descending (ties by id) and each goes
/// into the first open sequence with room. Samples are never split. The
/// result is ordered by descending used tokens, stable in creation order.
pub fn pack_samples(samples: &[Sample], capacity: usize) -> Result<Vec<PackedSequence>, WorkloadError> {
    if capacity == 0 {
        return Err(WorkloadError::ZeroCapacity);
    }
    for s in samples {
        s.validate()?;
        if s.total_tokens() > capacity as u64 {
            return Err(WorkloadError::SampleTooLarge(s.id.clone()));
        }
    }
    let mut order: Vec<&Sample> = samples.iter().collect();
    order.sort_by(|a, b| b.total_tokens().cmp(&a.total_tokens()).then_with(|| a.id.cmp(&b.id)));

    let sizes: Vec<u64> = order.iter().map(|s| s.total_tokens()).collect();
    let mut free = Vec::new();
    let slots = first_fit(&sizes, capacity as u64, &mut free);
    let mut bins: Vec<PackedSequence> =
        (0..free.len()).map(|_| PackedSequence { capacity, segments: Vec::new(), padding: capacity }).collect();
    for (sample, slot) in order.into_iter().zip(slots) {
        bins[slot].push_sample(sample);
    }
    bins.sort_by(|a, b| b.used_tokens().cmp(&a.used_tokens()));
    Ok(bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    /// Bidirectional attention inside each sample.
    FullWithinSample,
    /// Causal text-to-text, everything else bidirectional, inside each sample.
    CausalTextBidirVisual,
}

impl FromStr for MaskPolicy {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full_within_sample" => Ok(Self::FullWithinSample),
            "causal_text_bidir_visual" => Ok(Self::CausalTextBidirVisual),
            other => Err(WorkloadError::UnknownPolicy(other.to_string())),
        }
    }
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FullWithinSample => "full_within_sample",
            Self::CausalTextBidirVisual => "causal_text_bidir_visual",
        })
    }
}

/// Attention mask of a packed sequence. Padding rows and columns stay empty.
pub fn build_mask(seq: &PackedSequence, policy: MaskPolicy) -> MaskSpec {
    let mut rows: Vec<Vec<Range<usize>>> = vec![Vec::new(); seq.capacity];
    for (span, segments) in seq.sample_spans() {
        match policy {
            MaskPolicy::FullWithinSample => {
                for row in span.clone() {
                    rows[row] = vec![span.clone()];
                }
            }
            MaskPolicy::CausalTextBidirVisual => {
                let visual: Vec<Range<usize>> =
                    segments.iter().filter(|s| s.modality.is_visual()).map(Segment::range).collect();
                for seg in segments {
                    let range = seg.range();
                    if seg.modality.is_visual() {
                        for row in range {
                            rows[row] = vec![span.clone()];
                        }
                    } else {
                        for row in range.clone() {
                            let mut keys = visual.clone();
                            keys.push(range.start..row + 1);
                            rows[row] = keys;
                        }
                    }
                }
            }
        }
    }
    MaskSpec::from_rows(seq.capacity, &rows)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkloadFile {
    #[serde(default)]
    samples: Vec<Sample>,
    #[serde(default)]
    generators: Vec<GeneratorSpec>,
}

/// Parses a workload document: explicit samples first, then generator output.
pub fn parse_workload(text: &str) -> Result<Vec<Sample>, WorkloadError> {
    let file: WorkloadFile = serde_json::from_str(text).map_err(|e| WorkloadError::ParseError {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut samples = file.samples;
    for (index, gen) in file.generators.iter().enumerate() {
        samples.extend(gen.expand(index)?);
    }
    let mut seen = BTreeSet::new();
    for s in &samples {
        s.validate()?;
        if !seen.insert(s.id.as_str()) {
            return Err(WorkloadError::InvalidSample { id: s.id.clone(), reason: "duplicate id".into() });
        }
    }
    Ok(samples)
}

pub fn load_workload(path: impl AsRef<Path>) -> Result<Vec<Sample>, WorkloadError> {
    let text = std::fs::read_to_string(path)?;
    parse_workload(&text)
}
