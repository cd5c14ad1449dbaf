//! In-context sequence data model: system prompt, `n` demonstration
//! (image, text) pairs and the query pair, laid out in global token order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::linalg::Matrix;
use crate::rng::NormalStream;

/// Row-major `f32` embedding rows, as produced by a projector or text
/// embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::invalid("embedding matrix needs rows >= 1 and dim >= 1"));
        }
        if data.len() != rows * dim {
            return Err(Error::invalid(format!(
                "embedding data has {} values, expected {rows}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding contains non-finite values"));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("ragged embedding rows"));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.dim,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("shape checked at construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SegmentKind {
    System,
    IcdImage,
    IcdText,
    QueryImage,
    QueryText,
}

impl SegmentKind {
    pub fn code(self) -> u8 {
        match self {
            SegmentKind::System => 0,
            SegmentKind::IcdImage => 1,
            SegmentKind::IcdText => 2,
            SegmentKind::QueryImage => 3,
            SegmentKind::QueryText => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => SegmentKind::System,
            1 => SegmentKind::IcdImage,
            2 => SegmentKind::IcdText,
            3 => SegmentKind::QueryImage,
            4 => SegmentKind::QueryText,
            _ => return None,
        })
    }

    pub fn is_image(self) -> bool {
        matches!(self, SegmentKind::IcdImage | SegmentKind::QueryImage)
    }

    pub fn is_query(self) -> bool {
        matches!(self, SegmentKind::QueryImage | SegmentKind::QueryText)
    }

    pub fn is_icd(self) -> bool {
        matches!(self, SegmentKind::IcdImage | SegmentKind::IcdText)
    }
}

/// Half-open global token range `[start, start + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, idx: usize) -> bool {
        (self.start..self.end()).contains(&idx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub kind: SegmentKind,
    /// 0 for the system prompt, `1..=n` for demonstrations, `n + 1` for the
    /// query.
    pub sample_index: u32,
    pub span: Span,
    pub embeddings: EmbeddingMatrix,
}

/// Per-token tag in global order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenTag {
    pub kind: SegmentKind,
    pub sample_index: u32,
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InContextSequence {
    dim: usize,
    segments: Vec<Segment>,
}

impl InContextSequence {
    /// Builds a sequence from `(kind, sample_index, embeddings)` triples in
    /// global order, assigning contiguous spans, and validates it.
    pub fn new(dim: usize, parts: Vec<(SegmentKind, u32, EmbeddingMatrix)>) -> Result<Self> {
        let mut start = 0;
        let segments = parts
            .into_iter()
            .map(|(kind, sample_index, embeddings)| {
                let span = Span {
                    start,
                    len: embeddings.rows(),
                };
                start += span.len;
                Segment {
                    kind,
                    sample_index,
                    span,
                    embeddings,
                }
            })
            .collect();
        let seq = Self { dim, segments };
        let violations = validate(&seq);
        if violations.is_empty() {
            Ok(seq)
        } else {
            Err(Error::Validation(violations))
        }
    }

    /// Wraps segments as given, without recomputing spans or validating.
    pub fn from_segments_unchecked(dim: usize, segments: Vec<Segment>) -> Self {
        Self { dim, segments }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn n_shots(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::IcdImage)
            .count()
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.span.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Indices of image segments (demonstrations first, query last).
    pub fn image_segments(&self) -> impl Iterator<Item = usize> + '_ {
        self.segments
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind.is_image())
            .map(|(i, _)| i)
    }

    /// The text segment paired with the image segment at `image_seg`.
    pub fn paired_text(&self, image_seg: usize) -> Option<&Segment> {
        let img = self.segments.get(image_seg)?;
        let text_kind = match img.kind {
            SegmentKind::IcdImage => SegmentKind::IcdText,
            SegmentKind::QueryImage => SegmentKind::QueryText,
            _ => return None,
        };
        self.segments
            .iter()
            .find(|s| s.kind == text_kind && s.sample_index == img.sample_index)
    }

    pub fn total_image_tokens(&self) -> usize {
        self.image_segments().map(|i| self.segments[i].span.len).sum()
    }

    pub fn token_tags(&self) -> Vec<TokenTag> {
        let mut tags = Vec::with_capacity(self.len());
        for (segment, s) in self.segments.iter().enumerate() {
            tags.extend((0..s.span.len).map(|_| TokenTag {
                kind: s.kind,
                sample_index: s.sample_index,
                segment,
            }));
        }
        tags
    }

    /// All embedding rows in global order, widened to `f64`.
    pub fn to_matrix(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.len() * self.dim);
        for s in &self.segments {
            data.extend(s.embeddings.as_slice().iter().map(|&v| f64::from(v)));
        }
        Matrix::from_vec(self.len(), self.dim, data).expect("segment dims validated")
    }
}

/// Checks every structural invariant of an [`InContextSequence`]. Returns an
/// empty list iff the sequence is well formed.
pub fn validate(seq: &InContextSequence) -> Vec<Violation> {
    let mut out = Vec::new();
    if seq.dim == 0 {
        out.push(Violation::new(None, "dim must be >= 1"));
    }
    let segs = &seq.segments;
    if segs.is_empty() {
        out.push(Violation::new(None, "sequence has no segments"));
        return out;
    }

    let mut cursor = 0usize;
    for (i, s) in segs.iter().enumerate() {
        if s.span.start != cursor {
            let what = if s.span.start < cursor { "overlaps" } else { "leaves a gap after" };
            out.push(Violation::new(
                Some(i),
                format!(
                    "span starts at {} but {what} the previous segment ending at {cursor}",
                    s.span.start
                ),
            ));
        }
        if s.span.len != s.embeddings.rows() {
            out.push(Violation::new(
                Some(i),
                format!(
                    "span length {} disagrees with {} embedding rows",
                    s.span.len,
                    s.embeddings.rows()
                ),
            ));
        }
        if s.embeddings.dim() != seq.dim {
            out.push(Violation::new(
                Some(i),
                format!("embedding dim {} differs from sequence dim {}", s.embeddings.dim(), seq.dim),
            ));
        }
        if s.embeddings.as_slice().iter().any(|v| !v.is_finite()) {
            out.push(Violation::new(Some(i), "non-finite embedding value"));
        }
        cursor = s.span.end().max(cursor);
    }

    // Layout: [System] (IcdImage_i IcdText_i)* QueryImage QueryText
    let mut idx = 0;
    if segs[0].kind == SegmentKind::System {
        if segs[0].sample_index != 0 {
            out.push(Violation::new(Some(0), "system segment must have sample_index 0"));
        }
        idx = 1;
    }
    let mut expected_sample = 1u32;
    while idx < segs.len() && segs[idx].kind == SegmentKind::IcdImage {
        let s = &segs[idx];
        if s.sample_index != expected_sample {
            out.push(Violation::new(
                Some(idx),
                format!("ICD image has sample_index {}, expected {expected_sample}", s.sample_index),
            ));
        }
        match segs.get(idx + 1) {
            Some(t) if t.kind == SegmentKind::IcdText && t.sample_index == s.sample_index => {}
            _ => out.push(Violation::new(
                Some(idx),
                "ICD image is not immediately followed by its text segment",
            )),
        }
        idx += 2;
        expected_sample += 1;
    }
    let rest = &segs[idx.min(segs.len())..];
    let query_ok = rest.len() == 2
        && rest[0].kind == SegmentKind::QueryImage
        && rest[1].kind == SegmentKind::QueryText;
    if !query_ok {
        out.push(Violation::new(
            Some(idx.min(segs.len() - 1)),
            "sequence must end with exactly one query image followed by one query text",
        ));
    } else {
        for (off, s) in rest.iter().enumerate() {
            if s.sample_index != expected_sample {
                out.push(Violation::new(
                    Some(idx + off),
                    format!("query has sample_index {}, expected {expected_sample}", s.sample_index),
                ));
            }
        }
    }
    out
}

/// Pruning hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Fraction of all image tokens removed, in `[0, 1)`.
    pub ratio: f64,
    /// Decoder layer at which context pruning happens (`K`).
    pub start_layer: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Share of `ratio` spent in stage 1.
    pub stage1_fraction: f64,
    pub min_tokens_per_image: usize,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            ratio: 0.778,
            start_layer: 6,
            lambda1: 0.7,
            lambda2: 0.6,
            stage1_fraction: 0.5,
            min_tokens_per_image: 1,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn check(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::invalid(format!("ratio {} outside [0, 1)", self.ratio)));
        }
        if self.start_layer < 2 {
            return Err(Error::invalid("start layer K must be >= 2"));
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::invalid("lambda1 must be finite and >= 0"));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::invalid("lambda2 must be finite and >= 0"));
        }
        if !(self.stage1_fraction > 0.0 && self.stage1_fraction <= 1.0) {
            return Err(Error::invalid("stage1 fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Checks the config against a concrete sequence and decoder depth.
    pub fn check_for(&self, seq: &InContextSequence, num_layers: usize) -> Result<()> {
        self.check()?;
        if self.start_layer + 1 >= num_layers {
            return Err(Error::invalid(format!(
                "K + 1 = {} must be below the decoder layer count {num_layers}",
                self.start_layer + 1
            )));
        }
        for i in seq.image_segments() {
            let s = &seq.segments()[i];
            if s.span.len < self.min_tokens_per_image {
                return Err(Error::invalid(format!(
                    "image segment {i} has {} tokens, below the per-image minimum {}",
                    s.span.len, self.min_tokens_per_image
                )));
            }
        }
        Ok(())
    }
}

/// Shape of a synthetic sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_shots: usize,
    pub tokens_per_image: usize,
    pub tokens_per_text: usize,
    pub dim: usize,
    pub system_tokens: usize,
}

impl SynthSpec {
    pub fn new(n_shots: usize, tokens_per_image: usize, tokens_per_text: usize, dim: usize) -> Self {
        Self {
            n_shots,
            tokens_per_image,
            tokens_per_text,
            dim,
            system_tokens: 0,
        }
    }
}

/// Deterministic synthetic sequence. Rows are standard normal draws from a
/// SplitMix64/Box-Muller stream, each normalised to unit length.
pub fn synth_sequence(
    seed: u64,
    n_shots: usize,
    tokens_per_image: usize,
    tokens_per_text: usize,
    dim: usize,
) -> Result<InContextSequence> {
    synth_with(seed, SynthSpec::new(n_shots, tokens_per_image, tokens_per_text, dim))
}

pub fn synth_with(seed: u64, spec: SynthSpec) -> Result<InContextSequence> {
    if spec.tokens_per_image == 0 || spec.tokens_per_text == 0 {
        return Err(Error::invalid("token counts must be >= 1"));
    }
    if spec.dim < 2 {
        return Err(Error::invalid("dim must be >= 2"));
    }
    let mut normals = NormalStream::new(seed);
    let mut draw = |rows: usize| -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(rows * spec.dim);
        let mut row = vec![0.0f64; spec.dim];
        for _ in 0..rows {
            row.iter_mut().for_each(|v| *v = normals.next_normal());
            let n = crate::linalg::norm(&row);
            data.extend(row.iter().map(|v| (v / n) as f32));
        }
        EmbeddingMatrix::new(rows, spec.dim, data).expect("finite unit rows")
    };

    let n = spec.n_shots as u32;
    let mut parts = Vec::with_capacity(2 * spec.n_shots + 3);
    if spec.system_tokens > 0 {
        parts.push((SegmentKind::System, 0, draw(spec.system_tokens)));
    }
    for i in 1..=n {
        parts.push((SegmentKind::IcdImage, i, draw(spec.tokens_per_image)));
        parts.push((SegmentKind::IcdText, i, draw(spec.tokens_per_text)));
    }
    parts.push((SegmentKind::QueryImage, n + 1, draw(spec.tokens_per_image)));
    parts.push((SegmentKind::QueryText, n + 1, draw(spec.tokens_per_text)));
    InContextSequence::new(spec.dim, parts)
}
