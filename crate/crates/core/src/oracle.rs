//! Brute-force references. Nothing here shares code with the fast paths it
//! checks: similarities, objectives and softmax rows are recomputed from raw
//! components.

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Largest ground set [`brute_best`] will enumerate.
pub const MAX_GROUND: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct BruteResult {
    pub best_subset: Vec<usize>,
    pub best_value: f64,
    pub evaluated_count: u64,
}

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if aa.sqrt() < 1e-12 || bb.sqrt() < 1e-12 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Direct double-loop evaluation of the stage-1 objective.
pub fn brute_objective(ground: &Matrix, centroid: &[f64], subset: &[usize], lambda1: f64) -> f64 {
    if subset.is_empty() {
        return 0.0;
    }
    let mut div = 0.0;
    for x in 0..ground.rows() {
        let mut best = f64::NEG_INFINITY;
        for &y in subset {
            let s = 0.5 * (1.0 + naive_cos(ground.row(y), ground.row(x)));
            if s > best {
                best = s;
            }
        }
        div += best;
    }
    let mut align = 0.0;
    for &y in subset {
        align += naive_cos(ground.row(y), centroid);
    }
    div + lambda1 * align
}

/// Exhaustive search over all subsets of size `budget`. Ties keep the
/// lexicographically first subset.
pub fn brute_best(ground: &Matrix, centroid: &[f64], budget: usize, lambda1: f64) -> Result<BruteResult> {
    let n = ground.rows();
    if n > MAX_GROUND {
        return Err(Error::GuardExceeded { size: n, limit: MAX_GROUND });
    }
    if budget == 0 || budget > n {
        return Err(Error::invalid(format!("budget {budget} outside 1..={n}")));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut evaluated = 0u64;
    for subset in (0..n).combinations(budget) {
        evaluated += 1;
        let v = brute_objective(ground, centroid, &subset, lambda1);
        if best.as_ref().is_none_or(|(_, b)| v > *b) {
            best = Some((subset, v));
        }
    }
    let (best_subset, best_value) = best.expect("at least one subset");
    Ok(BruteResult {
        best_subset,
        best_value,
        evaluated_count: evaluated,
    })
}

/// Causal softmax row `row` of `hidden hiddenᵀ / sqrt(D)`, zero beyond the
/// diagonal.
pub fn brute_attention_row(hidden: &Matrix, row: usize) -> Vec<f64> {
    let d = hidden.cols() as f64;
    let mut logits = Vec::new();
    for j in 0..=row {
        let mut s = 0.0;
        for c in 0..hidden.cols() {
            s += hidden.get(row, c) * hidden.get(j, c);
        }
        logits.push(s / d.sqrt());
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut out = vec![0.0; hidden.rows()];
    for (j, e) in exps.into_iter().enumerate() {
        out[j] = e / total;
    }
    out
}
