//! In-decoder pruning. Context image tokens are scored at layer `K` by the
//! growth of attention they receive from the query's last token plus their
//! relevance to the pooled query; query image tokens are scored at layer
//! `K + 1` by relevance to the pooled surviving context.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderTrace;
use crate::error::{Error, Result};
use crate::linalg::{cosine_unchecked, mean_rows, Matrix};
use crate::seq::{InContextSequence, SegmentKind};
use crate::trace::ScoredToken;

/// One decoder row: which global token it carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowTag {
    pub global: usize,
    pub kind: SegmentKind,
    pub sample_index: u32,
}

/// Mapping from current decoder rows to global tokens, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowLayout {
    rows: Vec<RowTag>,
}

impl RowLayout {
    /// Layout of the surviving global indices `alive` (ascending).
    pub fn new(seq: &InContextSequence, alive: &[usize]) -> Self {
        let tags = seq.token_tags();
        Self {
            rows: alive
                .iter()
                .map(|&g| RowTag {
                    global: g,
                    kind: tags[g].kind,
                    sample_index: tags[g].sample_index,
                })
                .collect(),
        }
    }

    pub fn full(seq: &InContextSequence) -> Self {
        let alive: Vec<usize> = (0..seq.len()).collect();
        Self::new(seq, &alive)
    }

    pub fn rows(&self) -> &[RowTag] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn globals(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.global).collect()
    }

    pub fn rows_where(&self, pred: impl Fn(&RowTag) -> bool) -> Vec<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, t)| pred(t))
            .map(|(i, _)| i)
            .collect()
    }

    /// Row of the final query-text token.
    pub fn last_query_row(&self) -> Option<usize> {
        self.rows.iter().rposition(|t| t.kind == SegmentKind::QueryText)
    }

    /// Drops the rows whose global index is in `removed`. Returns the new
    /// layout and the kept row positions of the old one.
    pub fn without(&self, removed: &[usize]) -> (RowLayout, Vec<usize>) {
        let gone: std::collections::HashSet<usize> = removed.iter().copied().collect();
        let keep: Vec<usize> = (0..self.rows.len())
            .filter(|&i| !gone.contains(&self.rows[i].global))
            .collect();
        let rows = keep.iter().map(|&i| self.rows[i]).collect();
        (RowLayout { rows }, keep)
    }
}

/// Which attention signal enters the context score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AttentionSignal {
    /// `max(0, A_K - A_{K-1})` at the query's pivot row.
    #[default]
    Delta,
    /// `A_K` at the pivot row, no layer difference.
    Static,
    /// No attention term; relevance only.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextScore {
    pub global_index: usize,
    pub row: usize,
    pub sample_index: u32,
    pub delta_attention: f64,
    pub relevance: f64,
    pub total: f64,
}

/// Mean hidden state of the surviving query rows at `layer`.
pub fn query_pool(trace: &DecoderTrace, layout: &RowLayout, layer: usize) -> Result<Vec<f64>> {
    let h = hidden(trace, layer)?;
    check_rows(h, layout)?;
    mean_rows(h, layout.rows_where(|t| t.kind.is_query()))
        .ok_or_else(|| Error::invalid("no query rows to pool"))
}

/// `max(0, A_K[ql][c] - A_{K-1}[ql][c])`, defined only for `c < ql`.
pub fn delta_attention(a_k: &Matrix, a_k_minus_1: &Matrix, idx_ql: usize, idx_c: usize) -> Result<f64> {
    if idx_c >= idx_ql {
        return Err(Error::invalid(format!(
            "context row {idx_c} is not before the pivot row {idx_ql} (masked region)"
        )));
    }
    if idx_ql >= a_k.rows() || idx_ql >= a_k_minus_1.rows() {
        return Err(Error::invalid(format!("pivot row {idx_ql} out of range")));
    }
    Ok((a_k.get(idx_ql, idx_c) - a_k_minus_1.get(idx_ql, idx_c)).max(0.0))
}

/// Options for [`score_tokens`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextScoring {
    pub layer: usize,
    pub lambda2: f64,
    pub signal: AttentionSignal,
    /// Pivot row; defaults to the last query-text row.
    pub pivot_row: Option<usize>,
}

/// Scores every surviving demonstration image token at layer `K`.
pub fn score_context(trace: &DecoderTrace, layout: &RowLayout, scoring: &ContextScoring) -> Result<Vec<ContextScore>> {
    score_tokens(trace, layout, scoring, |t| t.kind == SegmentKind::IcdImage)
}

/// Scores the rows selected by `which` with the context score. All scores
/// are computed before any removal.
pub fn score_tokens(
    trace: &DecoderTrace,
    layout: &RowLayout,
    scoring: &ContextScoring,
    which: impl Fn(&RowTag) -> bool,
) -> Result<Vec<ContextScore>> {
    let k = scoring.layer;
    if k == 0 {
        return Err(Error::invalid("context scoring needs layer K >= 1"));
    }
    let h = hidden(trace, k)?;
    check_rows(h, layout)?;
    let a_k = attention(trace, k)?;
    let a_prev = attention(trace, k - 1)?;
    let pivot = match scoring.pivot_row {
        Some(r) => r,
        None => layout
            .last_query_row()
            .ok_or_else(|| Error::invalid("sequence has no query text row"))?,
    };
    let pooled = query_pool(trace, layout, k)?;
    layout
        .rows_where(which)
        .into_iter()
        .map(|row| {
            let tag = layout.rows()[row];
            let attn = match scoring.signal {
                AttentionSignal::Delta => delta_attention(a_k, a_prev, pivot, row)?,
                AttentionSignal::Static => {
                    if row >= pivot {
                        return Err(Error::invalid("scored row is not before the pivot row"));
                    }
                    a_k.get(pivot, row)
                }
                AttentionSignal::Off => 0.0,
            };
            let relevance = cosine_unchecked(h.row(row), &pooled);
            Ok(ContextScore {
                global_index: tag.global,
                row,
                sample_index: tag.sample_index,
                delta_attention: attn,
                relevance,
                total: attn + scoring.lambda2 * relevance,
            })
        })
        .collect()
}

/// Removes `quota` tokens in ascending score order (lower global index first
/// on ties), skipping any token whose image is already at `min_per_image`.
pub fn prune_context(scores: &[ContextScore], quota: usize, min_per_image: usize) -> Result<Vec<ScoredToken>> {
    let mut remaining: BTreeMap<u32, usize> = BTreeMap::new();
    for s in scores {
        *remaining.entry(s.sample_index).or_default() += 1;
    }
    let capacity: usize = remaining.values().map(|&n| n.saturating_sub(min_per_image)).sum();
    if quota > capacity {
        return Err(Error::invalid(format!(
            "quota {quota} exceeds the {capacity} removable token(s) under a per-image minimum of {min_per_image}"
        )));
    }
    let mut order: Vec<&ContextScore> = scores.iter().collect();
    order.sort_by(|a, b| a.total.total_cmp(&b.total).then(a.global_index.cmp(&b.global_index)));
    let mut removed = Vec::with_capacity(quota);
    for s in order {
        if removed.len() == quota {
            break;
        }
        let left = remaining.get_mut(&s.sample_index).expect("counted above");
        if *left <= min_per_image {
            continue;
        }
        *left -= 1;
        removed.push(ScoredToken {
            index: s.global_index,
            score: s.total,
        });
    }
    Ok(removed)
}

/// Which surviving demonstration tokens form the distilled context vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ContextPoolMode {
    #[default]
    ImageAndText,
    ImageOnly,
}

/// Mean hidden state at `layer` over surviving demonstration tokens.
/// `None` when there are no demonstrations.
pub fn context_pool(trace: &DecoderTrace, layout: &RowLayout, layer: usize, mode: ContextPoolMode) -> Result<Option<Vec<f64>>> {
    let h = hidden(trace, layer)?;
    check_rows(h, layout)?;
    let rows = layout.rows_where(|t| match mode {
        ContextPoolMode::ImageAndText => t.kind.is_icd(),
        ContextPoolMode::ImageOnly => t.kind == SegmentKind::IcdImage,
    });
    Ok(mean_rows(h, rows))
}

/// Relevance of each surviving query image token at `layer` to the pooled
/// context vector.
pub fn score_query(trace: &DecoderTrace, layout: &RowLayout, layer: usize, pooled: &[f64]) -> Result<Vec<ContextScore>> {
    let h = hidden(trace, layer)?;
    check_rows(h, layout)?;
    if pooled.len() != h.cols() {
        return Err(Error::invalid("pooled vector dim differs from hidden dim"));
    }
    Ok(layout
        .rows_where(|t| t.kind == SegmentKind::QueryImage)
        .into_iter()
        .map(|row| {
            let tag = layout.rows()[row];
            let relevance = cosine_unchecked(h.row(row), pooled);
            ContextScore {
                global_index: tag.global,
                row,
                sample_index: tag.sample_index,
                delta_attention: 0.0,
                relevance,
                total: relevance,
            }
        })
        .collect())
}

/// Stage-2 removal quotas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Stage2Quotas {
    pub total: usize,
    pub context: usize,
    pub query: usize,
    /// Tokens shifted between pools because of the per-image minimum.
    pub spilled: usize,
}

/// Final retention target `round(T * (1 - R))`.
pub fn final_target(total_image_tokens: usize, ratio: f64) -> usize {
    (total_image_tokens as f64 * (1.0 - ratio)).round() as usize
}

/// Splits the stage-2 removal count between the context and query pools in
/// proportion to their post-stage-1 sizes (context share rounded down).
///
/// `context_sizes` are the surviving token counts of each demonstration
/// image; `query_size` that of the query image. Quotas are then shifted
/// across pools when one side cannot honour `min_per_image`; if both
/// cannot, the shortfall is returned as [`Error::Infeasible`].
pub fn split_stage2_budget(
    context_sizes: &[usize],
    query_size: usize,
    target: usize,
    min_per_image: usize,
) -> Result<Stage2Quotas> {
    let context_total: usize = context_sizes.iter().sum();
    let alive = context_total + query_size;
    let total = alive.saturating_sub(target);
    if total == 0 {
        return Ok(Stage2Quotas::default());
    }
    let mut context = if context_sizes.is_empty() {
        0
    } else {
        ((total as u128 * context_total as u128) / alive as u128) as usize
    };
    let mut query = total - context;

    let cap_context: usize = context_sizes.iter().map(|&n| n.saturating_sub(min_per_image)).sum();
    let cap_query = query_size.saturating_sub(min_per_image);
    if total > cap_context + cap_query {
        return Err(Error::Infeasible {
            shortfall: total - cap_context - cap_query,
            detail: format!(
                "stage 2 must remove {total} but the per-image minimum of {min_per_image} leaves only {} removable",
                cap_context + cap_query
            ),
        });
    }
    let mut spilled = 0;
    if context > cap_context {
        spilled = context - cap_context;
        context = cap_context;
        query += spilled;
    } else if query > cap_query {
        spilled = query - cap_query;
        query = cap_query;
        context += spilled;
    }
    Ok(Stage2Quotas {
        total,
        context,
        query,
        spilled,
    })
}

fn hidden(trace: &DecoderTrace, layer: usize) -> Result<&Matrix> {
    trace
        .hidden_at(layer)
        .ok_or_else(|| Error::invalid(format!("trace has no hidden states for layer {layer}")))
}

fn attention(trace: &DecoderTrace, layer: usize) -> Result<&Matrix> {
    trace
        .attention_at(layer)
        .ok_or_else(|| Error::invalid(format!("trace has no attention for layer {layer}")))
}

fn check_rows(h: &Matrix, layout: &RowLayout) -> Result<()> {
    if h.rows() != layout.len() {
        return Err(Error::invalid(format!(
            "trace has {} rows but the layout has {}",
            h.rows(),
            layout.len()
        )));
    }
    Ok(())
}
