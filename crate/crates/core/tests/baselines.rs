use catp::baselines::{
    apply_criterion, criterion_scores, fastv_score, intra_cross_score, per_image_quotas, query_cross_score, Criterion,
    Scope,
};
use catp::decoder::{forward, ToyDecoderConfig};
use catp::linalg::Matrix;
use catp::oracle::brute_attention_row;
use catp::seq::{synth_sequence, SegmentKind};
use catp::stage2::RowLayout;
use proptest::prelude::*;

fn uniform_causal(n: usize) -> Matrix {
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            a.set(i, j, 1.0 / (i + 1) as f64);
        }
    }
    a
}

#[test]
fn fastv_harmonic_closed_form() {
    let n = 12;
    let a = uniform_causal(n);
    let h = |k: usize| (1..=k).map(|i| 1.0 / i as f64).sum::<f64>();
    for c in 0..n {
        assert!((fastv_score(&a, c) - (h(n) - h(c + 1))).abs() < 1e-12, "column {c}");
    }
}

#[test]
fn fastv_matches_brute_column_sums() {
    let seq = synth_sequence(21, 1, 4, 2, 8).unwrap();
    assert_eq!(seq.len(), 12);
    let dec = ToyDecoderConfig::with_layers(3);
    let trace = forward(&seq.to_matrix(), &dec).unwrap();
    let h = &trace.hidden[2];
    let brute: Vec<Vec<f64>> = (0..12).map(|r| brute_attention_row(h, r)).collect();
    let scores = criterion_scores(&seq, &Criterion::FastV { layer: 2 }, &dec).unwrap().unwrap();
    for s in &scores {
        let expect: f64 = (s.index + 1..12).map(|r| brute[r][s.index]).sum();
        assert!((s.score - expect).abs() < 1e-9, "{} vs {expect}", s.score);
    }
}

#[test]
fn criteria_ignore_rows_they_do_not_read() {
    let seq = synth_sequence(2, 2, 3, 2, 4).unwrap();
    let layout = RowLayout::full(&seq);
    let n = seq.len();
    let base = uniform_causal(n);
    let image_rows = layout.rows_where(|t| t.kind.is_image());
    for &c in &image_rows {
        let own = layout.rows()[c].sample_index;
        let mut perturbed = base.clone();
        for r in c + 1..n {
            let t = layout.rows()[r];
            let own_text = matches!(t.kind, SegmentKind::IcdText | SegmentKind::QueryText) && t.sample_index == own;
            if !own_text {
                perturbed.set(r, c, 0.37 + r as f64);
            }
        }
        assert_eq!(intra_cross_score(&base, &layout, c), intra_cross_score(&perturbed, &layout, c));

        let mut perturbed = base.clone();
        for r in c + 1..n {
            if !layout.rows()[r].kind.is_query() {
                perturbed.set(r, c, 0.91);
            }
        }
        assert_eq!(query_cross_score(&base, &layout, c), query_cross_score(&perturbed, &layout, c));
    }
}

#[test]
fn quotas_split_remainder_to_earliest() {
    assert_eq!(per_image_quotas(&[10, 10, 10], 0.5), vec![5, 5, 5]);
    assert_eq!(per_image_quotas(&[3, 3, 3], 0.5), vec![2, 1, 1]);
    let q = per_image_quotas(&[7, 5, 3], 0.778);
    assert_eq!(q.iter().sum::<usize>(), (15.0f64 * 0.778).floor() as usize);
}

fn criteria() -> Vec<Criterion> {
    vec![
        Criterion::Random { seed: 3 },
        Criterion::FastV { layer: 2 },
        Criterion::IntraCross { layer: 2 },
        Criterion::QueryCross { layer: 3 },
        Criterion::DiversityOnly,
    ]
}

#[test]
fn removal_count_and_text_untouched() {
    let seq = synth_sequence(5, 3, 17, 5, 16).unwrap();
    let dec = ToyDecoderConfig::with_layers(6);
    let tags = seq.token_tags();
    let t_img = seq.total_image_tokens();
    for c in criteria() {
        for scope in [Scope::Global, Scope::PerImage] {
            for ratio in [0.0, 0.5, 0.778] {
                let t = apply_criterion(&seq, &c, ratio, &dec, scope).unwrap();
                let removed = t.removed_indices();
                assert_eq!(removed.len(), (t_img as f64 * ratio).floor() as usize, "{c} {scope:?} {ratio}");
                assert!(removed.iter().all(|&g| tags[g].kind.is_image()));
                assert_eq!(t.method, c.to_string());
            }
        }
    }
}

#[test]
fn per_image_scope_follows_quotas() {
    let seq = synth_sequence(8, 2, 9, 3, 8).unwrap();
    let dec = ToyDecoderConfig::with_layers(4);
    let t = apply_criterion(&seq, &Criterion::FastV { layer: 2 }, 0.6, &dec, Scope::PerImage).unwrap();
    let quotas = per_image_quotas(&[9, 9, 9], 0.6);
    for (p, q) in t.per_image.iter().zip(quotas) {
        assert_eq!(p.tokens - p.retained, q);
    }
}

#[test]
fn random_is_deterministic_per_seed() {
    let seq = synth_sequence(8, 2, 16, 3, 8).unwrap();
    let dec = ToyDecoderConfig::with_layers(4);
    let a = apply_criterion(&seq, &Criterion::Random { seed: 11 }, 0.5, &dec, Scope::Global).unwrap();
    let b = apply_criterion(&seq, &Criterion::Random { seed: 11 }, 0.5, &dec, Scope::Global).unwrap();
    let c = apply_criterion(&seq, &Criterion::Random { seed: 12 }, 0.5, &dec, Scope::Global).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.removed_indices(), c.removed_indices());
}

#[test]
fn criterion_strings_round_trip() {
    for c in criteria() {
        let seed = match c {
            Criterion::Random { seed } => seed,
            _ => 0,
        };
        assert_eq!(Criterion::parse(&c.to_string(), seed).unwrap(), c);
    }
    assert_eq!(Criterion::parse("fastv", 0).unwrap(), Criterion::FastV { layer: 2 });
    assert!(Criterion::parse("nope", 0).is_err());
}

#[test]
fn layer_beyond_decoder_rejected() {
    let seq = synth_sequence(8, 1, 4, 2, 8).unwrap();
    let dec = ToyDecoderConfig::with_layers(4);
    assert!(apply_criterion(&seq, &Criterion::FastV { layer: 4 }, 0.5, &dec, Scope::Global).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn removed_tokens_score_no_higher_than_kept(seed in 0u64..500, ratio in 0.05f64..0.95) {
        let seq = synth_sequence(seed, 2, 10, 3, 8).unwrap();
        let dec = ToyDecoderConfig::with_layers(4);
        let c = Criterion::FastV { layer: 1 };
        let t = apply_criterion(&seq, &c, ratio, &dec, Scope::Global).unwrap();
        let scores = criterion_scores(&seq, &c, &dec).unwrap().unwrap();
        let removed = t.removed_indices();
        let max_removed = scores.iter().filter(|s| removed.contains(&s.index)).map(|s| s.score).fold(f64::MIN, f64::max);
        let min_kept = scores.iter().filter(|s| !removed.contains(&s.index)).map(|s| s.score).fold(f64::MAX, f64::min);
        prop_assert!(max_removed <= min_kept);
    }
}
