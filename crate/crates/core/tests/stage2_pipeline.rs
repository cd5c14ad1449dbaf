use catp::decoder::{DecoderTrace, ToyDecoderConfig};
use catp::linalg::Matrix;
use catp::pipeline::{run_catp_detailed, Ablation};
use catp::seq::{synth_sequence, SegmentKind};
use catp::stage2::{
    context_pool, query_pool, score_context, score_query, AttentionSignal, ContextPoolMode, ContextScoring, RowLayout,
};
use catp::trace::StageLabel;
use catp::{run_catp, Ablations, Error, PruneConfig};

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn naive_mean(m: &Matrix, rows: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for &r in rows {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out.iter().map(|v| v / rows.len() as f64).collect()
}

fn cfg(ratio: f64, k: usize, seed: u64) -> PruneConfig {
    PruneConfig {
        ratio,
        start_layer: k,
        seed,
        ..Default::default()
    }
}

#[test]
fn scores_match_recomputation_from_dumped_trace() {
    let seq = synth_sequence(7, 2, 8, 4, 16).unwrap();
    let config = cfg(0.778, 2, 7);
    let dec = ToyDecoderConfig::with_layers(6);
    let run = run_catp_detailed(&seq, &config, &dec, &Ablations::default()).unwrap();

    // Round-trip the decoder traces through JSON and recompute from scratch.
    let full: DecoderTrace = serde_json::from_str(&serde_json::to_string(run.decoder.as_ref().unwrap()).unwrap()).unwrap();
    let tags = seq.token_tags();
    let stage1_gone: Vec<usize> = run.trace.stage(StageLabel::Stage1).unwrap().removed.iter().map(|t| t.index).collect();
    let alive: Vec<usize> = (0..seq.len()).filter(|g| !stage1_gone.contains(g)).collect();
    let k = 2;
    let h = &full.hidden[k];
    let query_rows: Vec<usize> = (0..alive.len()).filter(|&r| tags[alive[r]].kind.is_query()).collect();
    let pivot = *query_rows.last().unwrap();
    assert_eq!(tags[alive[pivot]].kind, SegmentKind::QueryText);
    let vq = naive_mean(h, &query_rows);

    let icd_rows: Vec<usize> = (0..alive.len()).filter(|&r| tags[alive[r]].kind == SegmentKind::IcdImage).collect();
    assert_eq!(run.context_scores.len(), icd_rows.len());
    for (s, &r) in run.context_scores.iter().zip(&icd_rows) {
        let da = (full.attention[k].get(pivot, r) - full.attention[k - 1].get(pivot, r)).max(0.0);
        let expect = da + config.lambda2 * naive_cos(h.row(r), &vq);
        assert_eq!(s.global_index, alive[r]);
        assert!((s.total - expect).abs() < 1e-9, "row {r}: {} vs {expect}", s.total);
        assert!(s.delta_attention >= 0.0);
    }

    let resumed: DecoderTrace =
        serde_json::from_str(&serde_json::to_string(run.after_context.as_ref().unwrap()).unwrap()).unwrap();
    let ctx_gone: Vec<usize> = run.trace.stage(StageLabel::Stage2Context).unwrap().removed.iter().map(|t| t.index).collect();
    let alive2: Vec<usize> = alive.iter().copied().filter(|g| !ctx_gone.contains(g)).collect();
    let h1 = &resumed.hidden[0];
    assert_eq!(resumed.start_layer, k + 1);
    let ctx_rows: Vec<usize> = (0..alive2.len()).filter(|&r| tags[alive2[r]].kind.is_icd()).collect();
    let vc = naive_mean(h1, &ctx_rows);
    let qi_rows: Vec<usize> = (0..alive2.len()).filter(|&r| tags[alive2[r]].kind == SegmentKind::QueryImage).collect();
    assert_eq!(run.query_scores.len(), qi_rows.len());
    for (s, &r) in run.query_scores.iter().zip(&qi_rows) {
        assert_eq!(s.global_index, alive2[r]);
        assert!((s.total - naive_cos(h1.row(r), &vc)).abs() < 1e-9);
    }

    // Removed context tokens are the lowest-scoring ones.
    let mut sorted = run.context_scores.clone();
    sorted.sort_by(|a, b| a.total.total_cmp(&b.total).then(a.global_index.cmp(&b.global_index)));
    let mut lowest: Vec<usize> = sorted[..ctx_gone.len()].iter().map(|s| s.global_index).collect();
    lowest.sort_unstable();
    let mut got = ctx_gone.clone();
    got.sort_unstable();
    assert_eq!(got, lowest);
}

#[test]
fn recorded_scores_precede_removal() {
    let seq = synth_sequence(9, 3, 12, 4, 16).unwrap();
    let config = cfg(0.778, 3, 9);
    let run = run_catp_detailed(&seq, &config, &ToyDecoderConfig::with_layers(8), &Ablations::default()).unwrap();
    let stage1_gone: Vec<usize> = run.trace.stage(StageLabel::Stage1).unwrap().removed.iter().map(|t| t.index).collect();
    let alive: Vec<usize> = (0..seq.len()).filter(|g| !stage1_gone.contains(g)).collect();
    let layout = RowLayout::new(&seq, &alive);
    let scoring = ContextScoring {
        layer: 3,
        lambda2: config.lambda2,
        signal: AttentionSignal::Delta,
        pivot_row: None,
    };
    let again = score_context(run.decoder.as_ref().unwrap(), &layout, &scoring).unwrap();
    assert_eq!(again, run.context_scores);
}

#[test]
fn budget_is_exact_across_seeds_and_ratios() {
    for ratio in [0.667, 0.778, 0.899] {
        for seed in 0..10 {
            let seq = synth_sequence(seed, 3, 24, 4, 16).unwrap();
            let t = run_catp(&seq, &cfg(ratio, 3, seed), &ToyDecoderConfig::with_layers(6), &Ablations::default()).unwrap();
            let expect = (72.0 * 4.0 / 3.0 * (1.0 - ratio)).round() as usize;
            assert_eq!(t.retained_image_tokens, expect, "R={ratio} seed={seed}");
            assert_eq!(t.target_retained, expect);
            assert!(!t.guard.min_guard_binding);
        }
    }
}

#[test]
fn hand_budget_example() {
    let seq = synth_sequence(3, 2, 8, 4, 16).unwrap();
    let run = run_catp_detailed(&seq, &cfg(0.5, 2, 3), &ToyDecoderConfig::with_layers(6), &Ablations::default()).unwrap();
    assert!(run.trace.stage1.iter().all(|s| s.budget == 6));
    assert_eq!(run.quotas.total, 6);
    assert_eq!(run.quotas.context, 4);
    assert_eq!(run.quotas.query, 2);
    assert_eq!(run.trace.retained_image_tokens, 12);
}

#[test]
fn zero_ratio_removes_nothing() {
    let seq = synth_sequence(3, 2, 8, 4, 16).unwrap();
    let t = run_catp(&seq, &cfg(0.0, 2, 3), &ToyDecoderConfig::with_layers(6), &Ablations::default()).unwrap();
    assert_eq!(t.budgets.total_removed, 0);
    assert_eq!(t.final_retained, (0..seq.len()).collect::<Vec<_>>());
}

#[test]
fn trace_invariants() {
    let seq = synth_sequence(12, 4, 16, 4, 16).unwrap();
    let t = run_catp(&seq, &cfg(0.778, 4, 12), &ToyDecoderConfig::with_layers(8), &Ablations::default()).unwrap();
    let removed = t.removed_indices();
    assert!(removed.iter().all(|g| t.final_retained.binary_search(g).is_err()));
    assert_eq!(removed.len() + t.final_retained.len(), seq.len());
    let tags = seq.token_tags();
    assert!(removed.iter().all(|&g| tags[g].kind.is_image()));
    assert_eq!(t.layer_tokens.len(), 8);
    assert!(t.layer_tokens.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(*t.layer_tokens.last().unwrap(), t.final_retained.len());
}

#[test]
fn adaptivity_shows_up_over_seeds() {
    let unequal = (0..20).any(|seed| {
        let seq = synth_sequence(seed, 4, 32, 6, 16).unwrap();
        let t = run_catp(&seq, &cfg(0.778, 3, seed), &ToyDecoderConfig::with_layers(6), &Ablations::default()).unwrap();
        let c = t.icd_retained_counts();
        c.iter().any(|&x| x != c[0])
    });
    assert!(unequal);
}

#[test]
fn zero_shot_puts_everything_on_the_query() {
    let seq = synth_sequence(4, 0, 16, 4, 8).unwrap();
    let run = run_catp_detailed(&seq, &cfg(0.5, 2, 4), &ToyDecoderConfig::with_layers(5), &Ablations::default()).unwrap();
    assert_eq!(run.quotas.context, 0);
    assert_eq!(run.trace.retained_image_tokens, 8);
}

#[test]
fn infeasible_budget_reports_shortfall() {
    let seq = synth_sequence(4, 2, 2, 2, 8).unwrap();
    let config = PruneConfig {
        ratio: 0.9,
        start_layer: 2,
        ..Default::default()
    };
    match run_catp(&seq, &config, &ToyDecoderConfig::with_layers(5), &Ablations::default()) {
        Err(Error::Infeasible { shortfall, .. }) => assert_eq!(shortfall, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn decoder_too_shallow_is_rejected() {
    let seq = synth_sequence(4, 1, 4, 2, 8).unwrap();
    assert!(run_catp(&seq, &cfg(0.5, 4, 0), &ToyDecoderConfig::with_layers(5), &Ablations::default()).is_err());
}

fn ablated(list: &[Ablation]) -> Ablations {
    Ablations::from_list(list).unwrap()
}

#[test]
fn no_delta_a_ranks_by_relevance() {
    let seq = synth_sequence(5, 3, 16, 4, 16).unwrap();
    let run = run_catp_detailed(&seq, &cfg(0.778, 3, 5), &ToyDecoderConfig::with_layers(7), &ablated(&[Ablation::NoDeltaA])).unwrap();
    for s in &run.context_scores {
        assert_eq!(s.delta_attention, 0.0);
        assert_eq!(s.total, 0.6 * s.relevance);
    }
    let mut by_total = run.context_scores.clone();
    by_total.sort_by(|a, b| a.total.total_cmp(&b.total).then(a.global_index.cmp(&b.global_index)));
    let mut by_rel = run.context_scores.clone();
    by_rel.sort_by(|a, b| a.relevance.total_cmp(&b.relevance).then(a.global_index.cmp(&b.global_index)));
    assert_eq!(by_total, by_rel);
}

#[test]
fn isolate_icds_equalises_counts() {
    for seed in 0..5 {
        let seq = synth_sequence(seed, 4, 20, 4, 16).unwrap();
        let t = run_catp(&seq, &cfg(0.778, 3, seed), &ToyDecoderConfig::with_layers(6), &ablated(&[Ablation::IsolateIcds])).unwrap();
        let c = t.icd_retained_counts();
        let (lo, hi) = (c.iter().min().unwrap(), c.iter().max().unwrap());
        assert!(hi - lo <= 1, "{c:?}");
        assert_eq!(t.retained_image_tokens, t.target_retained);
    }
}

#[test]
fn merged_query_prune_is_single_stage() {
    let seq = synth_sequence(6, 3, 16, 4, 16).unwrap();
    let t = run_catp(&seq, &cfg(0.778, 3, 6), &ToyDecoderConfig::with_layers(7), &ablated(&[Ablation::MergedQueryPrune])).unwrap();
    assert!(t.stage(StageLabel::Stage2Merged).is_some());
    assert!(t.stage(StageLabel::Stage2Query).is_none());
    assert_eq!(t.retained_image_tokens, t.target_retained);
    assert_eq!(t.layer_tokens[4], t.final_retained.len());
}

#[test]
fn random_pivot_is_seeded() {
    let seq = synth_sequence(6, 3, 16, 4, 16).unwrap();
    let dec = ToyDecoderConfig::with_layers(7);
    let a = run_catp_detailed(&seq, &cfg(0.778, 3, 1), &dec, &ablated(&[Ablation::RandomQl])).unwrap();
    let b = run_catp_detailed(&seq, &cfg(0.778, 3, 1), &dec, &ablated(&[Ablation::RandomQl])).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.trace.retained_image_tokens, a.trace.target_retained);
    let pivots: std::collections::BTreeSet<usize> = (0..8)
        .map(|s| run_catp_detailed(&seq, &cfg(0.778, 3, s), &dec, &ablated(&[Ablation::RandomQl])).unwrap().pivot_row.unwrap())
        .collect();
    assert!(pivots.len() > 1);
}

#[test]
fn static_attention_uses_layer_k() {
    let seq = synth_sequence(6, 2, 12, 4, 16).unwrap();
    let run = run_catp_detailed(&seq, &cfg(0.778, 3, 6), &ToyDecoderConfig::with_layers(7), &ablated(&[Ablation::StaticAttention])).unwrap();
    let a = run.decoder.as_ref().unwrap().attention_at(3).unwrap();
    let p = run.pivot_row.unwrap();
    for s in &run.context_scores {
        assert_eq!(s.delta_attention, a.get(p, s.row));
    }
}

#[test]
fn single_stage_ablations_hit_their_budgets() {
    let seq = synth_sequence(2, 4, 32, 4, 16).unwrap();
    let dec = ToyDecoderConfig::with_layers(7);
    let t = run_catp(&seq, &cfg(0.778, 3, 2), &dec, &ablated(&[Ablation::Stage1Only])).unwrap();
    assert!(t.stage(StageLabel::Stage2Context).is_none());
    assert!(t.per_image.iter().all(|p| p.retained == (32.0f64 * (1.0 - 0.778)).floor() as usize));
    let t = run_catp(&seq, &cfg(0.778, 3, 2), &dec, &ablated(&[Ablation::Stage2Only])).unwrap();
    assert!(t.stage(StageLabel::Stage1).is_none());
    assert_eq!(t.retained_image_tokens, t.target_retained);
}

#[test]
fn image_only_context_pool_changes_pool() {
    let seq = synth_sequence(6, 2, 12, 4, 16).unwrap();
    let dec = ToyDecoderConfig::with_layers(7);
    let run = run_catp_detailed(&seq, &cfg(0.778, 3, 6), &dec, &Ablations::default()).unwrap();
    let stage1_gone: Vec<usize> = run.trace.stage(StageLabel::Stage1).unwrap().removed.iter().map(|t| t.index).collect();
    let ctx_gone: Vec<usize> = run.trace.stage(StageLabel::Stage2Context).unwrap().removed.iter().map(|t| t.index).collect();
    let alive: Vec<usize> = (0..seq.len()).filter(|g| !stage1_gone.contains(g) && !ctx_gone.contains(g)).collect();
    let layout = RowLayout::new(&seq, &alive);
    let resumed = run.after_context.as_ref().unwrap();
    let both = context_pool(resumed, &layout, 4, ContextPoolMode::ImageAndText).unwrap().unwrap();
    let img = context_pool(resumed, &layout, 4, ContextPoolMode::ImageOnly).unwrap().unwrap();
    assert_ne!(both, img);
}

#[test]
fn incompatible_ablations_rejected() {
    assert!(Ablations::from_list(&[Ablation::Stage1Only, Ablation::Stage2Only]).is_err());
    assert!(Ablations::from_list(&[Ablation::NoDeltaA, Ablation::StaticAttention]).is_err());
    assert!(Ablations::from_list(&[Ablation::MergedQueryPrune, Ablation::IsolateIcds]).is_err());
    assert!(Ablations::from_list(&[Ablation::Stage1Only, Ablation::RandomQl]).is_err());
    assert!(Ablations::from_list(&[Ablation::Stage2Only, Ablation::IsolateIcds]).is_ok());
    assert!("no-delta-a".parse::<Ablation>().is_ok());
    assert!("bogus".parse::<Ablation>().is_err());
}

fn hand_trace(rows: Vec<Vec<f64>>) -> DecoderTrace {
    let n = rows.len();
    let h = Matrix::from_rows(&rows).unwrap();
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            a.set(i, j, 1.0 / (i + 1) as f64);
        }
    }
    DecoderTrace {
        start_layer: 0,
        hidden: vec![h.clone(), h],
        attention: vec![a],
    }
}

#[test]
fn query_pool_examples() {
    let seq = synth_sequence(1, 1, 2, 1, 2).unwrap();
    // Layout: ICD image (0,1), ICD text 2, query image (3,4), query text 5.
    // Keep one query token only.
    let layout = RowLayout::new(&seq, &[0, 1, 2, 5]);
    let t = hand_trace(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5], vec![0.3, -0.7]]);
    assert_eq!(query_pool(&t, &layout, 0).unwrap(), vec![0.3, -0.7]);

    let layout = RowLayout::new(&seq, &[0, 1, 2, 3, 4, 5]);
    let t = hand_trace(vec![
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![0.5, 0.5],
        vec![0.2, 0.4],
        vec![0.2, 0.4],
        vec![0.2, 0.4],
    ]);
    assert_eq!(query_pool(&t, &layout, 0).unwrap(), vec![0.2, 0.4]);

    let t = hand_trace(vec![
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![0.5, 0.5],
        vec![1.0, 2.0],
        vec![-4.0, 0.5],
        vec![0.25, 1.0],
    ]);
    let p = query_pool(&t, &layout, 0).unwrap();
    assert!((p[0] - (1.0 - 4.0 + 0.25) / 3.0).abs() < 1e-15);
    assert!((p[1] - (2.0 + 0.5 + 1.0) / 3.0).abs() < 1e-15);
}

#[test]
fn query_scores_examples() {
    let seq = synth_sequence(1, 1, 2, 1, 2).unwrap();
    let layout = RowLayout::new(&seq, &[0, 1, 2, 3, 4, 5]);
    let t = hand_trace(vec![
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![0.5, 0.5],
        vec![0.6, 0.8],
        vec![-0.8, 0.6],
        vec![0.0, 1.0],
    ]);
    let s = score_query(&t, &layout, 0, &[0.6, 0.8]).unwrap();
    assert_eq!(s.len(), 2);
    assert!((s[0].total - 1.0).abs() < 1e-15);
    assert!(s[1].total.abs() < 1e-15);
}

#[test]
fn context_scores_degenerate_weightings() {
    let seq = synth_sequence(1, 2, 3, 1, 4).unwrap();
    let layout = RowLayout::full(&seq);
    let n = seq.len();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![(i as f64).sin(), (i as f64).cos(), 0.1, 1.0]).collect();
    let t = hand_trace(rows.clone());
    // Uniform attention in every layer: the delta term vanishes.
    let mut two = t.clone();
    two.attention.push(t.attention[0].clone());
    two.hidden.push(t.hidden[0].clone());
    let s = score_context(
        &two,
        &layout,
        &ContextScoring { layer: 1, lambda2: 0.6, signal: AttentionSignal::Delta, pivot_row: None },
    )
    .unwrap();
    assert!(s.iter().all(|c| c.delta_attention == 0.0 && c.total == 0.6 * c.relevance));

    // lambda2 = 0: totals are the attention deltas alone.
    let mut shifted = two.clone();
    let mut a1 = shifted.attention[1].clone();
    let last = n - 1;
    for j in 0..n {
        a1.set(last, j, if j == 0 { 0.5 } else { 0.5 / (n - 1) as f64 });
    }
    shifted.attention[1] = a1;
    let s = score_context(
        &shifted,
        &layout,
        &ContextScoring { layer: 1, lambda2: 0.0, signal: AttentionSignal::Delta, pivot_row: None },
    )
    .unwrap();
    assert!(s.iter().all(|c| c.total == c.delta_attention));
    assert!(s[0].total > 0.0);
}
