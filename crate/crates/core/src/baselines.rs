//! Reference criteria: random, attention received (FastV-style), attention
//! from the paired text (intra-cross), attention from the query sample
//! (query-cross), and diversity-only greedy selection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::{forward, ToyDecoderConfig};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SplitMix64;
use crate::seq::{InContextSequence, SegmentKind};
use crate::stage1::{greedy_select, text_centroid};
use crate::stage2::RowLayout;
use crate::trace::{Budgets, GuardFlags, ImageRetention, PruneTrace, ScoredToken, StageLabel, StageRemoval};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Criterion {
    Random { seed: u64 },
    FastV { layer: usize },
    IntraCross { layer: usize },
    QueryCross { layer: usize },
    DiversityOnly,
}

impl Criterion {
    pub fn layer(&self) -> Option<usize> {
        match *self {
            Criterion::FastV { layer } | Criterion::IntraCross { layer } | Criterion::QueryCross { layer } => {
                Some(layer)
            }
            _ => None,
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Criterion::Random { .. } => f.write_str("random"),
            Criterion::FastV { layer } => write!(f, "fastv:{layer}"),
            Criterion::IntraCross { layer } => write!(f, "intra-cross:{layer}"),
            Criterion::QueryCross { layer } => write!(f, "query-cross:{layer}"),
            Criterion::DiversityOnly => f.write_str("diversity"),
        }
    }
}

impl Criterion {
    /// Parses `name[:layer]`; `seed` fills in the random criterion.
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        let (name, layer) = match s.split_once(':') {
            Some((n, l)) => {
                let layer = l
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad layer in criterion '{s}'")))?;
                (n, Some(layer))
            }
            None => (s, None),
        };
        let name = name.trim().to_ascii_lowercase().replace('_', "-");
        let no_layer = |c: Criterion| {
            if layer.is_some() {
                Err(Error::invalid(format!("criterion '{name}' takes no layer")))
            } else {
                Ok(c)
            }
        };
        match name.as_str() {
            "random" => no_layer(Criterion::Random { seed }),
            "diversity" | "diversity-only" => no_layer(Criterion::DiversityOnly),
            "fastv" => Ok(Criterion::FastV { layer: layer.unwrap_or(2) }),
            "intra-cross" | "intra" => Ok(Criterion::IntraCross { layer: layer.unwrap_or(2) }),
            "query-cross" | "query" => Ok(Criterion::QueryCross { layer: layer.unwrap_or(8) }),
            _ => Err(Error::invalid(format!("unknown criterion '{s}'"))),
        }
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::parse(s, 0)
    }
}

/// Global ranking across all images, or a fixed quota per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Scope {
    #[default]
    Global,
    PerImage,
}

/// Total attention received from every later row.
pub fn fastv_score(a: &Matrix, idx_c: usize) -> f64 {
    (idx_c + 1..a.rows()).map(|r| a.get(r, idx_c)).sum()
}

/// Attention received from the text rows of the token's own sample.
pub fn intra_cross_score(a: &Matrix, layout: &RowLayout, idx_c: usize) -> f64 {
    let own = layout.rows()[idx_c].sample_index;
    layout
        .rows()
        .iter()
        .enumerate()
        .skip(idx_c + 1)
        .filter(|(_, t)| matches!(t.kind, SegmentKind::IcdText | SegmentKind::QueryText) && t.sample_index == own)
        .map(|(r, _)| a.get(r, idx_c))
        .sum()
}

/// Attention received from the query image and query text rows.
pub fn query_cross_score(a: &Matrix, layout: &RowLayout, idx_c: usize) -> f64 {
    layout
        .rows()
        .iter()
        .enumerate()
        .skip(idx_c + 1)
        .filter(|(_, t)| t.kind.is_query())
        .map(|(r, _)| a.get(r, idx_c))
        .sum()
}

/// Scores of every image token under a score-based criterion, in global
/// order. `None` for [`Criterion::DiversityOnly`], which selects rather than
/// scores.
pub fn criterion_scores(
    seq: &InContextSequence,
    criterion: &Criterion,
    decoder: &ToyDecoderConfig,
) -> Result<Option<Vec<ScoredToken>>> {
    let layout = RowLayout::full(seq);
    let image_rows = layout.rows_where(|t| t.kind.is_image());
    let scores = match *criterion {
        Criterion::DiversityOnly => return Ok(None),
        Criterion::Random { seed } => {
            let mut rng = SplitMix64::new(seed);
            image_rows
                .iter()
                .map(|&r| ScoredToken {
                    index: r,
                    score: rng.next_f64(),
                })
                .collect()
        }
        Criterion::FastV { layer } | Criterion::IntraCross { layer } | Criterion::QueryCross { layer } => {
            if layer >= decoder.num_layers {
                return Err(Error::invalid(format!(
                    "criterion layer {layer} not below decoder depth {}",
                    decoder.num_layers
                )));
            }
            let cfg = ToyDecoderConfig {
                num_layers: layer + 1,
                ..*decoder
            };
            let trace = forward(&seq.to_matrix(), &cfg)?;
            let a = &trace.attention[layer];
            image_rows
                .iter()
                .map(|&r| ScoredToken {
                    index: r,
                    score: match criterion {
                        Criterion::FastV { .. } => fastv_score(a, r),
                        Criterion::IntraCross { .. } => intra_cross_score(a, &layout, r),
                        _ => query_cross_score(a, &layout, r),
                    },
                })
                .collect()
        }
    };
    Ok(Some(scores))
}

/// Per-image removal quotas summing to `floor(T * ratio)`: each image gets
/// `floor(S_i * ratio)` and the remainder goes one token at a time to the
/// earliest images.
pub fn per_image_quotas(sizes: &[usize], ratio: f64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let want = (total as f64 * ratio).floor() as usize;
    let mut q: Vec<usize> = sizes.iter().map(|&s| (s as f64 * ratio).floor() as usize).collect();
    let mut rest = want.saturating_sub(q.iter().sum());
    for (qi, &s) in q.iter_mut().zip(sizes) {
        if rest == 0 {
            break;
        }
        if *qi < s {
            *qi += 1;
            rest -= 1;
        }
    }
    q
}

fn ascending(mut v: Vec<ScoredToken>) -> Vec<ScoredToken> {
    v.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.index.cmp(&b.index)));
    v
}

/// Removes `floor(T * ratio)` image tokens by ascending criterion score.
pub fn apply_criterion(
    seq: &InContextSequence,
    criterion: &Criterion,
    ratio: f64,
    decoder: &ToyDecoderConfig,
    scope: Scope,
) -> Result<PruneTrace> {
    let violations = crate::seq::validate(seq);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("ratio {ratio} outside [0, 1)")));
    }
    let total = seq.total_image_tokens();
    let want = (total as f64 * ratio).floor() as usize;
    let image_segs: Vec<usize> = seq.image_segments().collect();
    let sizes: Vec<usize> = image_segs.iter().map(|&i| seq.segments()[i].span.len).collect();

    let (removed, scored) = match criterion {
        Criterion::DiversityOnly => (diversity_removals(seq, &image_segs, &per_image_quotas(&sizes, ratio))?, Vec::new()),
        _ => {
            let scores = criterion_scores(seq, criterion, decoder)?.expect("score-based criterion");
            let removed = match scope {
                Scope::Global => ascending(scores.clone()).into_iter().take(want).collect(),
                Scope::PerImage => {
                    let quotas = per_image_quotas(&sizes, ratio);
                    let mut out = Vec::with_capacity(want);
                    for (&seg, &q) in image_segs.iter().zip(&quotas) {
                        let span = seq.segments()[seg].span;
                        let own: Vec<ScoredToken> = scores.iter().filter(|t| span.contains(t.index)).copied().collect();
                        out.extend(ascending(own).into_iter().take(q));
                    }
                    out
                }
            };
            (removed, scores)
        }
    };

    let mut gone: Vec<usize> = removed.iter().map(|t| t.index).collect();
    gone.sort_unstable();
    let alive: Vec<usize> = (0..seq.len()).filter(|g| gone.binary_search(g).is_err()).collect();
    let per_image: Vec<ImageRetention> = image_segs
        .iter()
        .map(|&i| {
            let s = &seq.segments()[i];
            ImageRetention {
                segment: i,
                kind: s.kind,
                sample_index: s.sample_index,
                start: s.span.start,
                tokens: s.span.len,
                retained: s.span.len - gone.iter().filter(|&&g| s.span.contains(g)).count(),
            }
        })
        .collect();
    let full = seq.len();
    let kept = alive.len();
    let layer_tokens = match criterion.layer() {
        Some(l) => (0..decoder.num_layers).map(|i| if i <= l { full } else { kept }).collect(),
        None => vec![kept; decoder.num_layers],
    };
    let seed = match criterion {
        Criterion::Random { seed } => *seed,
        _ => 0,
    };
    Ok(PruneTrace {
        method: criterion.to_string(),
        seed,
        ratio,
        start_layer: criterion.layer(),
        num_layers: Some(decoder.num_layers),
        ablations: match scope {
            Scope::Global => Vec::new(),
            Scope::PerImage => vec!["per_image".into()],
        },
        total_image_tokens: total,
        target_retained: total - want,
        retained_image_tokens: total - removed.len(),
        stage1: Vec::new(),
        budgets: Budgets {
            total_removed: removed.len(),
            ..Default::default()
        },
        removals: vec![StageRemoval {
            stage: StageLabel::Criterion,
            layer: criterion.layer(),
            removed,
        }],
        scored,
        final_retained: alive,
        per_image,
        guard: GuardFlags::default(),
        layer_tokens,
        timestamp: None,
    })
}

fn diversity_removals(seq: &InContextSequence, image_segs: &[usize], quotas: &[usize]) -> Result<Vec<ScoredToken>> {
    let mut out = Vec::new();
    for (&seg_idx, &q) in image_segs.iter().zip(quotas) {
        let seg = &seq.segments()[seg_idx];
        let keep = seg.span.len - q;
        if keep == 0 {
            out.extend((0..seg.span.len).map(|l| ScoredToken {
                index: seg.span.start + l,
                score: 0.0,
            }));
            continue;
        }
        let text = seq
            .paired_text(seg_idx)
            .ok_or_else(|| Error::invalid("image without paired text"))?;
        let centroid = text_centroid(&text.embeddings.to_matrix())?;
        let ground = seg.embeddings.to_matrix();
        let sel = greedy_select(&ground, &centroid, keep, 0.0)?;
        // Score removed tokens by their residual coverage gain.
        let mut cover = vec![0.0f64; ground.rows()];
        for &y in &sel.retained_local_indices {
            for (x, c) in cover.iter_mut().enumerate() {
                *c = c.max(crate::stage1::div_sim(ground.row(y), ground.row(x))?);
            }
        }
        let mut removed = Vec::new();
        for y in (0..ground.rows()).filter(|y| sel.retained_local_indices.binary_search(y).is_err()) {
            let mut gain = 0.0;
            for (x, c) in cover.iter().enumerate() {
                gain += (crate::stage1::div_sim(ground.row(y), ground.row(x))? - c).max(0.0);
            }
            removed.push(ScoredToken {
                index: seg.span.start + y,
                score: gain,
            });
        }
        out.extend(ascending(removed));
    }
    Ok(out)
}
