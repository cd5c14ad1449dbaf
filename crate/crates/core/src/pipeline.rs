//! End-to-end pruning: stage 1 before the decoder, context pruning at layer
//! `K`, query pruning at layer `K + 1`, then the rest of the decoder on the
//! survivors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::{forward, resume_forward, DecoderTrace, ToyDecoderConfig};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
pub use crate::stage2::ContextPoolMode;
use crate::seq::{InContextSequence, PruneConfig, SegmentKind};
use crate::stage1::{stage1_prune_with, Stage1Outcome};
use crate::stage2::{
    context_pool, final_target, prune_context, score_query, score_tokens, split_stage2_budget, AttentionSignal,
    ContextScore, ContextScoring, RowLayout, Stage2Quotas,
};
use crate::trace::{Budgets, GuardFlags, ImageRetention, PruneTrace, ScoredToken, StageLabel, StageRemoval};

/// Ablation switches. The default runs the full method.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    /// Context score without the attention term (relevance only).
    pub no_delta_a: bool,
    /// Context score uses `A_K` directly instead of the layer difference.
    pub static_attention: bool,
    /// Seeded random query token as the attention pivot.
    pub random_ql: bool,
    /// Query image tokens pruned together with the context at layer `K`.
    pub merged_query_prune: bool,
    /// Each demonstration loses the same share of its tokens.
    pub isolate_icds: bool,
    /// Stage 1 spends the whole ratio; no decoder-side pruning.
    pub stage1_only: bool,
    /// Skip stage 1; stage 2 spends the whole ratio.
    pub stage2_only: bool,
    pub context_pool: ContextPoolMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    NoDeltaA,
    StaticAttention,
    RandomQl,
    MergedQueryPrune,
    IsolateIcds,
    Stage1Only,
    Stage2Only,
    ImageOnlyContextPool,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::NoDeltaA,
        Ablation::StaticAttention,
        Ablation::RandomQl,
        Ablation::MergedQueryPrune,
        Ablation::IsolateIcds,
        Ablation::Stage1Only,
        Ablation::Stage2Only,
        Ablation::ImageOnlyContextPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoDeltaA => "no_delta_a",
            Ablation::StaticAttention => "static_attention",
            Ablation::RandomQl => "random_ql",
            Ablation::MergedQueryPrune => "merged_query_prune",
            Ablation::IsolateIcds => "isolate_icds",
            Ablation::Stage1Only => "stage1_only",
            Ablation::Stage2Only => "stage2_only",
            Ablation::ImageOnlyContextPool => "image_only_context_pool",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().replace('-', "_");
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown ablation '{s}'")))
    }
}

impl Ablations {
    pub fn enable(&mut self, a: Ablation) {
        match a {
            Ablation::NoDeltaA => self.no_delta_a = true,
            Ablation::StaticAttention => self.static_attention = true,
            Ablation::RandomQl => self.random_ql = true,
            Ablation::MergedQueryPrune => self.merged_query_prune = true,
            Ablation::IsolateIcds => self.isolate_icds = true,
            Ablation::Stage1Only => self.stage1_only = true,
            Ablation::Stage2Only => self.stage2_only = true,
            Ablation::ImageOnlyContextPool => self.context_pool = ContextPoolMode::ImageOnly,
        }
    }

    pub fn from_list(list: &[Ablation]) -> Result<Self> {
        let mut a = Self::default();
        for &x in list {
            a.enable(x);
        }
        a.check()?;
        Ok(a)
    }

    pub fn names(&self) -> Vec<String> {
        Ablation::ALL
            .into_iter()
            .filter(|&a| self.has(a))
            .map(|a| a.name().to_string())
            .collect()
    }

    pub fn has(&self, a: Ablation) -> bool {
        match a {
            Ablation::NoDeltaA => self.no_delta_a,
            Ablation::StaticAttention => self.static_attention,
            Ablation::RandomQl => self.random_ql,
            Ablation::MergedQueryPrune => self.merged_query_prune,
            Ablation::IsolateIcds => self.isolate_icds,
            Ablation::Stage1Only => self.stage1_only,
            Ablation::Stage2Only => self.stage2_only,
            Ablation::ImageOnlyContextPool => self.context_pool == ContextPoolMode::ImageOnly,
        }
    }

    /// Rejects combinations that have no coherent meaning.
    pub fn check(&self) -> Result<()> {
        let conflict = |a: Ablation, b: Ablation| -> Result<()> {
            if self.has(a) && self.has(b) {
                Err(Error::invalid(format!("ablations {a} and {b} cannot be combined")))
            } else {
                Ok(())
            }
        };
        conflict(Ablation::Stage1Only, Ablation::Stage2Only)?;
        conflict(Ablation::NoDeltaA, Ablation::StaticAttention)?;
        conflict(Ablation::MergedQueryPrune, Ablation::IsolateIcds)?;
        conflict(Ablation::MergedQueryPrune, Ablation::RandomQl)?;
        conflict(Ablation::MergedQueryPrune, Ablation::ImageOnlyContextPool)?;
        if self.stage1_only {
            for a in Ablation::ALL {
                if !matches!(a, Ablation::Stage1Only) {
                    conflict(Ablation::Stage1Only, a)?;
                }
            }
        }
        Ok(())
    }

    fn signal(&self) -> AttentionSignal {
        if self.no_delta_a {
            AttentionSignal::Off
        } else if self.static_attention {
            AttentionSignal::Static
        } else {
            AttentionSignal::Delta
        }
    }
}

/// Everything the pipeline computed, for callers that need more than the
/// trace (tests, diagnostics).
#[derive(Debug, Clone)]
pub struct CatpRun {
    pub trace: PruneTrace,
    /// Decoder over the stage-1 survivors, all layers.
    pub decoder: Option<DecoderTrace>,
    /// Decoder resumed at `K + 1` after context removal.
    pub after_context: Option<DecoderTrace>,
    /// Decoder resumed at `K + 2` after query removal.
    pub after_query: Option<DecoderTrace>,
    pub context_scores: Vec<ContextScore>,
    pub query_scores: Vec<ContextScore>,
    pub quotas: Stage2Quotas,
    pub pivot_row: Option<usize>,
}

pub fn run_catp(
    seq: &InContextSequence,
    config: &PruneConfig,
    decoder: &ToyDecoderConfig,
    ablations: &Ablations,
) -> Result<PruneTrace> {
    run_catp_detailed(seq, config, decoder, ablations).map(|r| r.trace)
}

pub fn run_catp_detailed(
    seq: &InContextSequence,
    config: &PruneConfig,
    decoder: &ToyDecoderConfig,
    ablations: &Ablations,
) -> Result<CatpRun> {
    let violations = crate::seq::validate(seq);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    ablations.check()?;
    config.check_for(seq, decoder.num_layers)?;

    let total_image = seq.total_image_tokens();
    let target = final_target(total_image, config.ratio);
    let mut guard = GuardFlags::default();
    let mut removals = Vec::new();

    // Stage 1
    let stage1 = if ablations.stage2_only {
        None
    } else {
        let fraction = if ablations.stage1_only { 1.0 } else { config.stage1_fraction };
        Some(stage1_prune_with(seq, config, fraction)?)
    };
    let mut alive: Vec<usize> = (0..seq.len()).collect();
    if let Some(Stage1Outcome { removed, guard_binding, .. }) = &stage1 {
        guard.min_guard_binding |= *guard_binding;
        let mut gone: Vec<usize> = removed.iter().map(|t| t.index).collect();
        gone.sort_unstable();
        alive.retain(|g| gone.binary_search(g).is_err());
        let mut ordered = removed.clone();
        ordered.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.index.cmp(&b.index)));
        removals.push(StageRemoval {
            stage: StageLabel::Stage1,
            layer: None,
            removed: ordered,
        });
    }
    let stage1_removed = seq.len() - alive.len();
    let selections = stage1.map(|s| s.selections).unwrap_or_default();

    let mut run = CatpRun {
        trace: PruneTrace {
            method: "catp".into(),
            seed: config.seed,
            ratio: config.ratio,
            start_layer: Some(config.start_layer),
            num_layers: Some(decoder.num_layers),
            ablations: ablations.names(),
            total_image_tokens: total_image,
            target_retained: target,
            retained_image_tokens: 0,
            stage1: selections,
            removals,
            scored: Vec::new(),
            final_retained: Vec::new(),
            per_image: Vec::new(),
            budgets: Budgets {
                stage1_removed,
                ..Default::default()
            },
            guard,
            layer_tokens: Vec::new(),
            timestamp: None,
        },
        decoder: None,
        after_context: None,
        after_query: None,
        context_scores: Vec::new(),
        query_scores: Vec::new(),
        quotas: Stage2Quotas::default(),
        pivot_row: None,
    };

    if ablations.stage1_only {
        finish(seq, &mut run.trace, &alive);
        return Ok(run);
    }

    let k = config.start_layer;
    let layout = RowLayout::new(seq, &alive);
    let full = forward(&seq.to_matrix().select_rows(&alive), decoder)?;

    let image_sizes = |layout: &RowLayout, kind: SegmentKind| -> Vec<usize> {
        let mut counts: Vec<(u32, usize)> = Vec::new();
        for t in layout.rows().iter().filter(|t| t.kind == kind) {
            match counts.last_mut() {
                Some((s, c)) if *s == t.sample_index => *c += 1,
                _ => counts.push((t.sample_index, 1)),
            }
        }
        counts.into_iter().map(|(_, c)| c).collect()
    };
    let context_sizes = image_sizes(&layout, SegmentKind::IcdImage);
    let query_size: usize = image_sizes(&layout, SegmentKind::QueryImage).iter().sum();
    let alive_image = context_sizes.iter().sum::<usize>() + query_size;
    run.trace.guard.stage1_overshoot = alive_image < target;

    let pivot_row = if ablations.random_ql {
        let query_rows = layout.rows_where(|t| t.kind.is_query());
        let mut rng = SplitMix64::new(config.seed);
        let r = query_rows[rng.next_index(query_rows.len())];
        // The pivot must follow every scored token.
        Some(r)
    } else {
        layout.last_query_row()
    };
    run.pivot_row = pivot_row;
    let scoring = ContextScoring {
        layer: k,
        lambda2: config.lambda2,
        signal: ablations.signal(),
        pivot_row,
    };
    let min = config.min_tokens_per_image;

    if ablations.merged_query_prune {
        let total = alive_image.saturating_sub(target);
        let scores = score_tokens(&full, &layout, &scoring, |t| t.kind.is_image())?;
        let cap: usize = context_sizes
            .iter()
            .chain(std::iter::once(&query_size))
            .map(|&n| n.saturating_sub(min))
            .sum();
        if total > cap {
            return Err(Error::Infeasible {
                shortfall: total - cap,
                detail: format!("merged stage 2 must remove {total}, only {cap} removable"),
            });
        }
        let removed = prune_context(&scores, total, min)?;
        let gone: Vec<usize> = removed.iter().map(|t| t.index).collect();
        let (after, keep) = layout.without(&gone);
        let resumed = resume_k_plus_1(&full, k, &keep, decoder)?;
        run.trace.budgets.stage2_context = removed.len();
        run.trace.removals.push(StageRemoval {
            stage: StageLabel::Stage2Merged,
            layer: Some(k),
            removed,
        });
        run.quotas = Stage2Quotas {
            total,
            context: total,
            query: 0,
            spilled: 0,
        };
        run.context_scores = scores;
        run.trace.layer_tokens = layer_counts(&full, k + 1, Some(&resumed), None);
        run.decoder = Some(full);
        run.after_context = Some(resumed);
        finish(seq, &mut run.trace, &after.globals());
        return Ok(run);
    }

    let quotas = split_stage2_budget(&context_sizes, query_size, target, min)?;
    run.trace.guard.spilled = quotas.spilled;
    run.trace.guard.min_guard_binding |= quotas.spilled > 0;
    run.quotas = quotas;

    // Context at layer K
    let context_scores = score_tokens(&full, &layout, &scoring, |t| t.kind == SegmentKind::IcdImage)?;
    let context_removed = if ablations.isolate_icds {
        isolate_prune(&context_scores, &context_sizes, quotas.context, min)?
    } else {
        prune_context(&context_scores, quotas.context, min)?
    };
    let gone: Vec<usize> = context_removed.iter().map(|t| t.index).collect();
    let (after_context, keep) = layout.without(&gone);
    let resumed = resume_k_plus_1(&full, k, &keep, decoder)?;

    // Query at layer K + 1
    let pooled = context_pool(&resumed, &after_context, k + 1, ablations.context_pool)?
        .unwrap_or_else(|| vec![0.0; seq.dim()]);
    let query_scores = score_query(&resumed, &after_context, k + 1, &pooled)?;
    let query_removed = prune_context(&query_scores, quotas.query, min)?;
    let gone: Vec<usize> = query_removed.iter().map(|t| t.index).collect();
    let (after_query, keep) = after_context.without(&gone);
    let h = resumed
        .hidden_at(k + 2)
        .expect("resumed trace covers K + 2")
        .select_rows(&keep);
    let final_trace = if k + 2 < decoder.num_layers {
        Some(resume_forward(&h, k + 2, decoder)?)
    } else {
        None
    };

    run.trace.budgets.stage2_context = context_removed.len();
    run.trace.budgets.stage2_query = query_removed.len();
    run.trace.removals.push(StageRemoval {
        stage: StageLabel::Stage2Context,
        layer: Some(k),
        removed: context_removed,
    });
    run.trace.removals.push(StageRemoval {
        stage: StageLabel::Stage2Query,
        layer: Some(k + 1),
        removed: query_removed,
    });
    run.trace.layer_tokens = layer_counts(&full, k + 1, Some(&resumed), final_trace.as_ref());
    run.context_scores = context_scores;
    run.query_scores = query_scores;
    run.decoder = Some(full);
    run.after_context = Some(resumed);
    run.after_query = final_trace;
    finish(seq, &mut run.trace, &after_query.globals());
    Ok(run)
}

/// Drops pruned rows from the output of layer `K` and runs the decoder from
/// `K + 1`.
fn resume_k_plus_1(full: &DecoderTrace, k: usize, keep: &[usize], decoder: &ToyDecoderConfig) -> Result<DecoderTrace> {
    let h = full
        .hidden_at(k + 1)
        .ok_or_else(|| Error::invalid("decoder too shallow for K + 1"))?
        .select_rows(keep);
    resume_forward(&h, k + 1, decoder)
}

/// Per-demonstration pruning with equal quotas (remainder to the earliest
/// demonstrations).
fn isolate_prune(scores: &[ContextScore], sizes: &[usize], quota: usize, min: usize) -> Result<Vec<ScoredToken>> {
    let n = sizes.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut samples: Vec<u32> = scores.iter().map(|s| s.sample_index).collect();
    samples.dedup();
    let mut out = Vec::with_capacity(quota);
    for (i, sample) in samples.iter().enumerate() {
        let share = quota / n + usize::from(i < quota % n);
        let own: Vec<ContextScore> = scores.iter().filter(|s| s.sample_index == *sample).copied().collect();
        out.extend(prune_context(&own, share, min).map_err(|_| Error::Infeasible {
            shortfall: share.saturating_sub(own.len().saturating_sub(min)),
            detail: format!("demonstration {sample} cannot lose {share} token(s)"),
        })?);
    }
    Ok(out)
}

fn layer_counts(
    full: &DecoderTrace,
    resume_at: usize,
    resumed: Option<&DecoderTrace>,
    last: Option<&DecoderTrace>,
) -> Vec<usize> {
    let mut counts: Vec<usize> = full.attention[..resume_at].iter().map(|a| a.rows()).collect();
    if let Some(r) = resumed {
        let upto = last.map_or(r.attention.len(), |l| l.start_layer - r.start_layer);
        counts.extend(r.attention[..upto].iter().map(|a| a.rows()));
    }
    if let Some(l) = last {
        counts.extend(l.attention.iter().map(|a| a.rows()));
    }
    counts
}

fn finish(seq: &InContextSequence, trace: &mut PruneTrace, alive: &[usize]) {
    let mut per_image = Vec::new();
    for i in seq.image_segments() {
        let s = &seq.segments()[i];
        let retained = alive.iter().filter(|&&g| s.span.contains(g)).count();
        per_image.push(ImageRetention {
            segment: i,
            kind: s.kind,
            sample_index: s.sample_index,
            start: s.span.start,
            tokens: s.span.len,
            retained,
        });
    }
    trace.retained_image_tokens = per_image.iter().map(|p| p.retained).sum();
    trace.budgets.total_removed = seq.len() - alive.len();
    trace.final_retained = alive.to_vec();
    trace.per_image = per_image;
}
