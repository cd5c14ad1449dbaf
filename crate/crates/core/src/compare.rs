//! Agreement metrics between pruning traces.

use std::collections::BTreeSet;

use crate::seq::InContextSequence;
use crate::trace::PruneTrace;

/// `|A ∩ B| / |A ∪ B|`; 1 for two empty sets.
pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Ranks with ties sharing their average rank (1-based).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either side is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Retained image tokens of a trace.
pub fn retained_images(seq: &InContextSequence, trace: &PruneTrace) -> BTreeSet<usize> {
    let tags = seq.token_tags();
    trace
        .final_retained
        .iter()
        .copied()
        .filter(|&g| tags[g].kind.is_image())
        .collect()
}

/// A per-image-token "keep" score, one value per image token in global
/// order. Criteria with full scores use them directly; otherwise a token
/// removed in stage `s` (trace order) at position `p` of `len` scores
/// `s + p / len`, and retained tokens all score the number of stages.
pub fn keep_scores(seq: &InContextSequence, trace: &PruneTrace) -> Vec<f64> {
    let tags = seq.token_tags();
    let images: Vec<usize> = (0..seq.len()).filter(|&g| tags[g].kind.is_image()).collect();
    if !trace.scored.is_empty() {
        let mut v = vec![0.0; seq.len()];
        for t in &trace.scored {
            v[t.index] = t.score;
        }
        return images.iter().map(|&g| v[g]).collect();
    }
    let stages = trace.removals.len() as f64;
    let mut v = vec![stages; seq.len()];
    for (s, stage) in trace.removals.iter().enumerate() {
        let len = stage.removed.len().max(1) as f64;
        for (p, t) in stage.removed.iter().enumerate() {
            v[t.index] = s as f64 + p as f64 / len;
        }
    }
    images.iter().map(|&g| v[g]).collect()
}
