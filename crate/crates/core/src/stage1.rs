//! Pre-decoder selection: for every image, keep the subset that maximises
//! a facility-location diversity term plus a text-alignment term.
//!
//! The diversity similarity is the cosine shifted into `[0, 1]`, which keeps
//! the facility-location function monotone submodular for arbitrary inputs.
//! Alignment uses the raw cosine to the mean embedding of the paired text.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cosine, cosine_unchecked, mean_rows, Matrix};
use crate::seq::{InContextSequence, PruneConfig};
use crate::trace::{round6, round6_vec, ScoredToken};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Selection {
    pub segment: usize,
    pub image_sample_index: u32,
    pub image_tokens: usize,
    pub budget: usize,
    /// Retained local indices, ascending.
    pub retained_local_indices: Vec<usize>,
    /// Local indices in the order greedy picked them.
    pub selection_order: Vec<usize>,
    #[serde(serialize_with = "round6")]
    pub objective_value: f64,
    #[serde(serialize_with = "round6_vec")]
    pub per_step_marginal_gains: Vec<f64>,
}

pub fn text_centroid(text: &Matrix) -> Result<Vec<f64>> {
    mean_rows(text, 0..text.rows()).ok_or_else(|| Error::invalid("empty text segment"))
}

pub fn align_score(token: &[f64], centroid: &[f64]) -> Result<f64> {
    cosine(token, centroid)
}

/// `(1 + cos(a, b)) / 2`, in `[0, 1]`.
pub fn div_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok((1.0 + cosine(a, b)?) / 2.0)
}

fn check_inputs(ground: &Matrix, centroid: &[f64]) -> Result<()> {
    if ground.rows() == 0 {
        return Err(Error::invalid("empty ground set"));
    }
    if centroid.len() != ground.cols() {
        return Err(Error::invalid(format!(
            "centroid dim {} differs from token dim {}",
            centroid.len(),
            ground.cols()
        )));
    }
    Ok(())
}

/// `F_div(Y) + lambda1 * F_align(Y)` evaluated directly.
pub fn stage1_objective(ground: &Matrix, centroid: &[f64], subset: &[usize], lambda1: f64) -> Result<f64> {
    check_inputs(ground, centroid)?;
    if let Some(&bad) = subset.iter().find(|&&i| i >= ground.rows()) {
        return Err(Error::invalid(format!("subset index {bad} out of range")));
    }
    if subset.is_empty() {
        return Ok(0.0);
    }
    let div: f64 = ground
        .iter_rows()
        .map(|x| {
            subset
                .iter()
                .map(|&y| (1.0 + cosine_unchecked(ground.row(y), x)) / 2.0)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    let align: f64 = subset
        .iter()
        .map(|&y| cosine_unchecked(ground.row(y), centroid))
        .sum();
    Ok(div + lambda1 * align)
}

/// Pairwise shifted similarities plus per-token alignment, computed once per
/// image.
struct Ground {
    n: usize,
    sim: Vec<f64>,
    align: Vec<f64>,
}

impl Ground {
    fn new(ground: &Matrix, centroid: &[f64]) -> Self {
        let n = ground.rows();
        let mut sim = vec![0.0; n * n];
        for y in 0..n {
            sim[y * n + y] = (1.0 + cosine_unchecked(ground.row(y), ground.row(y))) / 2.0;
            for x in y + 1..n {
                let s = (1.0 + cosine_unchecked(ground.row(y), ground.row(x))) / 2.0;
                sim[y * n + x] = s;
                sim[x * n + y] = s;
            }
        }
        let align = ground
            .iter_rows()
            .map(|r| cosine_unchecked(r, centroid))
            .collect();
        Self { n, sim, align }
    }

    fn diversity_gain(&self, y: usize, cover: &[f64]) -> f64 {
        self.sim[y * self.n..(y + 1) * self.n]
            .iter()
            .zip(cover)
            .map(|(s, c)| (s - c).max(0.0))
            .sum()
    }
}

struct GreedyRun {
    order: Vec<usize>,
    gains: Vec<f64>,
    /// Marginal gain of each unselected token against the final set.
    residual: Vec<(usize, f64)>,
}

fn run_greedy(ground: &Matrix, centroid: &[f64], budget: usize, lambda1: f64) -> GreedyRun {
    let g = Ground::new(ground, centroid);
    let mut cover = vec![0.0; g.n];
    let mut selected = vec![false; g.n];
    let mut order = Vec::with_capacity(budget);
    let mut gains = Vec::with_capacity(budget);
    for _ in 0..budget {
        let mut best: Option<(usize, f64)> = None;
        for y in (0..g.n).filter(|&y| !selected[y]) {
            let gain = g.diversity_gain(y, &cover) + lambda1 * g.align[y];
            if best.is_none_or(|(_, b)| gain > b) {
                best = Some((y, gain));
            }
        }
        let (y, gain) = best.expect("budget <= ground size");
        selected[y] = true;
        order.push(y);
        gains.push(gain);
        for (c, s) in cover.iter_mut().zip(&g.sim[y * g.n..(y + 1) * g.n]) {
            *c = c.max(*s);
        }
    }
    let residual = (0..g.n)
        .filter(|&y| !selected[y])
        .map(|y| (y, g.diversity_gain(y, &cover) + lambda1 * g.align[y]))
        .collect();
    GreedyRun {
        order,
        gains,
        residual,
    }
}

/// Plain greedy: `budget` steps, each adding the token with the largest
/// marginal gain, lowest index on ties.
pub fn greedy_select(ground: &Matrix, centroid: &[f64], budget: usize, lambda1: f64) -> Result<Stage1Selection> {
    check_inputs(ground, centroid)?;
    if budget == 0 || budget > ground.rows() {
        return Err(Error::invalid(format!(
            "budget {budget} outside 1..={}",
            ground.rows()
        )));
    }
    let run = run_greedy(ground, centroid, budget, lambda1);
    let mut retained = run.order.clone();
    retained.sort_unstable();
    let objective_value = stage1_objective(ground, centroid, &retained, lambda1)?;
    Ok(Stage1Selection {
        segment: 0,
        image_sample_index: 0,
        image_tokens: ground.rows(),
        budget,
        retained_local_indices: retained,
        selection_order: run.order,
        objective_value,
        per_step_marginal_gains: run.gains,
    })
}

/// `max(min_tokens, floor(tokens * (1 - fraction * ratio)))`, never above
/// `tokens`.
pub fn stage1_budget(tokens: usize, ratio: f64, fraction: f64, min_tokens: usize) -> usize {
    let raw = (tokens as f64 * (1.0 - fraction * ratio)).floor() as usize;
    raw.max(min_tokens).min(tokens)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Outcome {
    pub selections: Vec<Stage1Selection>,
    /// Removed global indices, scored by their marginal gain against the
    /// final selection of their image.
    pub removed: Vec<ScoredToken>,
    /// Set when the per-image minimum raised some budget.
    pub guard_binding: bool,
}

/// Runs stage 1 on every image with the budget rule above. Text and system
/// tokens are untouched. `fraction` overrides `config.stage1_fraction` (the
/// stage-1-only ablation spends the whole ratio here).
pub fn stage1_prune_with(seq: &InContextSequence, config: &PruneConfig, fraction: f64) -> Result<Stage1Outcome> {
    config.check()?;
    let mut selections = Vec::new();
    let mut removed = Vec::new();
    let mut guard_binding = false;
    for seg_idx in seq.image_segments() {
        let seg = &seq.segments()[seg_idx];
        let text = seq
            .paired_text(seg_idx)
            .ok_or_else(|| Error::invalid(format!("image segment {seg_idx} has no paired text")))?;
        let centroid = text_centroid(&text.embeddings.to_matrix())?;
        let ground = seg.embeddings.to_matrix();
        let tokens = ground.rows();
        let raw = (tokens as f64 * (1.0 - fraction * config.ratio)).floor() as usize;
        let budget = stage1_budget(tokens, config.ratio, fraction, config.min_tokens_per_image);
        guard_binding |= raw < config.min_tokens_per_image;

        let run = run_greedy(&ground, &centroid, budget, config.lambda1);
        let mut retained = run.order.clone();
        retained.sort_unstable();
        let objective_value = stage1_objective(&ground, &centroid, &retained, config.lambda1)?;
        removed.extend(run.residual.iter().map(|&(local, score)| ScoredToken {
            index: seg.span.start + local,
            score,
        }));
        selections.push(Stage1Selection {
            segment: seg_idx,
            image_sample_index: seg.sample_index,
            image_tokens: tokens,
            budget,
            retained_local_indices: retained,
            selection_order: run.order,
            objective_value,
            per_step_marginal_gains: run.gains,
        });
    }
    Ok(Stage1Outcome {
        selections,
        removed,
        guard_binding,
    })
}

pub fn stage1_prune(seq: &InContextSequence, config: &PruneConfig) -> Result<Stage1Outcome> {
    stage1_prune_with(seq, config, config.stage1_fraction)
}
