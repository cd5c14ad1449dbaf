use catp::linalg::Matrix;
use catp::oracle::{brute_best, brute_objective};
use catp::rng::NormalStream;
use catp::stage1::{greedy_select, stage1_objective};
use proptest::prelude::*;

const GREEDY_RATIO: f64 = 1.0 - 1.0 / std::f64::consts::E;

fn random_ground(seed: u64, n: usize, d: usize) -> (Matrix, Vec<f64>) {
    let mut s = NormalStream::new(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| s.next_normal()).collect()).collect();
    let centroid = (0..d).map(|_| s.next_normal()).collect();
    (Matrix::from_rows(&rows).unwrap(), centroid)
}

#[test]
fn objective_matches_brute_on_three_tokens() {
    let g = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-0.6, 0.8]]).unwrap();
    let c = [0.5, 0.5];
    for subset in [vec![0, 1], vec![0, 2], vec![1, 2]] {
        let fast = stage1_objective(&g, &c, &subset, 0.7).unwrap();
        let brute = brute_objective(&g, &c, &subset, 0.7);
        assert!((fast - brute).abs() < 1e-9, "{subset:?}: {fast} vs {brute}");
    }
    // Hand value for {0, 1}: coverage of x2 is max((1-0.6)/2, (1+0.8)/2) = 0.9,
    // so F_div = 1 + 1 + 0.9 and both tokens align with cos = 1/sqrt(2).
    let v = stage1_objective(&g, &c, &[0, 1], 0.7).unwrap();
    assert!((v - (2.9 + 0.7 * 2.0 * std::f64::consts::FRAC_1_SQRT_2)).abs() < 1e-12);
}

#[test]
fn greedy_budget_one_is_brute_medoid() {
    for seed in 0..20 {
        let (g, c) = random_ground(seed, 9, 5);
        let sel = greedy_select(&g, &c, 1, 0.0).unwrap();
        let best = brute_best(&g, &c, 1, 0.0).unwrap();
        assert_eq!(sel.retained_local_indices, best.best_subset, "seed {seed}");
    }
}

#[test]
fn greedy_ten_tokens_budget_four_with_alignment() {
    let (g, c) = random_ground(2024, 10, 8);
    let sel = greedy_select(&g, &c, 4, 0.7).unwrap();
    let opt = brute_best(&g, &c, 4, 0.7).unwrap();
    assert_eq!(opt.evaluated_count, 210);
    assert!(sel.objective_value >= GREEDY_RATIO * opt.best_value - 1e-9);
    assert!(opt.best_value >= sel.objective_value - 1e-9);
}

#[test]
fn greedy_objective_value_is_recomputed() {
    let (g, c) = random_ground(5, 12, 6);
    let sel = greedy_select(&g, &c, 5, 0.7).unwrap();
    let brute = brute_objective(&g, &c, &sel.retained_local_indices, 0.7);
    assert!((sel.objective_value - brute).abs() < 1e-9);
}

#[test]
fn huge_lambda_selects_top_alignment() {
    for seed in 0..10 {
        let (g, c) = random_ground(100 + seed, 12, 6);
        let sel = greedy_select(&g, &c, 4, 1e6).unwrap();
        let mut by_align: Vec<usize> = (0..12).collect();
        let align = |i: usize| catp::linalg::cosine(g.row(i), &c).unwrap();
        by_align.sort_by(|&a, &b| align(b).total_cmp(&align(a)).then(a.cmp(&b)));
        let mut top = by_align[..4].to_vec();
        top.sort_unstable();
        assert_eq!(sel.retained_local_indices, top);
    }
}

#[test]
fn diversity_gains_do_not_increase() {
    for seed in 0..20 {
        let (g, c) = random_ground(seed, 12, 4);
        let sel = greedy_select(&g, &c, 8, 0.0).unwrap();
        for w in sel.per_step_marginal_gains.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }
}

#[test]
fn greedy_ratio_over_seeded_instances() {
    let mut equal = 0;
    for seed in 0..120u64 {
        let n = 6 + (seed % 7) as usize;
        let budget = 1 + (seed % 6) as usize;
        let (g, c) = random_ground(seed, n, 3 + (seed % 5) as usize);
        let sel = greedy_select(&g, &c, budget.min(n), 0.0).unwrap();
        let opt = brute_best(&g, &c, budget.min(n), 0.0).unwrap();
        assert!(sel.objective_value >= GREEDY_RATIO * opt.best_value - 1e-9, "seed {seed}");
        assert!(opt.best_value >= sel.objective_value - 1e-9);
        if (opt.best_value - sel.objective_value).abs() < 1e-12 {
            equal += 1;
        }
    }
    println!("greedy matched the optimum on {equal}/120 instances");
}

fn ground_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (3usize..10, 2usize..6).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n),
            prop::collection::vec(-1.0f64..1.0, d),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn diversity_is_submodular((rows, c) in ground_strategy(), mask_small in any::<u16>(), mask_extra in any::<u16>(), pick in any::<prop::sample::Index>()) {
        let g = Matrix::from_rows(&rows).unwrap();
        let n = g.rows();
        let small: Vec<usize> = (0..n).filter(|i| mask_small >> i & 1 == 1).collect();
        let mut big = small.clone();
        big.extend((0..n).filter(|i| mask_extra >> i & 1 == 1 && !small.contains(i)));
        big.sort_unstable();
        let outside: Vec<usize> = (0..n).filter(|i| !big.contains(i)).collect();
        prop_assume!(!outside.is_empty());
        let y = outside[pick.index(outside.len())];
        let gain = |set: &[usize]| {
            let mut with = set.to_vec();
            with.push(y);
            stage1_objective(&g, &c, &with, 0.0).unwrap() - stage1_objective(&g, &c, set, 0.0).unwrap()
        };
        prop_assert!(gain(&small) >= gain(&big) - 1e-9);
    }

    #[test]
    fn diversity_is_monotone((rows, c) in ground_strategy(), mask in any::<u16>(), extra in any::<prop::sample::Index>()) {
        let g = Matrix::from_rows(&rows).unwrap();
        let n = g.rows();
        let set: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let y = extra.index(n);
        let mut bigger = set.clone();
        if !bigger.contains(&y) { bigger.push(y); }
        prop_assert!(stage1_objective(&g, &c, &bigger, 0.0).unwrap() >= stage1_objective(&g, &c, &set, 0.0).unwrap() - 1e-12);
    }

    #[test]
    fn fast_objective_agrees_with_brute((rows, c) in ground_strategy(), mask in any::<u16>(), lambda in 0.0f64..3.0) {
        let g = Matrix::from_rows(&rows).unwrap();
        let set: Vec<usize> = (0..g.rows()).filter(|i| mask >> i & 1 == 1).collect();
        let fast = stage1_objective(&g, &c, &set, lambda).unwrap();
        prop_assert!((fast - brute_objective(&g, &c, &set, lambda)).abs() < 1e-9);
    }

    #[test]
    fn permuting_ground_permutes_selection(seed in any::<u64>(), shift in 1usize..9) {
        let (g, c) = random_ground(seed, 9, 4);
        // Rotate the rows: new index j holds old row (j + shift) % n.
        let n = g.rows();
        let perm: Vec<usize> = (0..n).map(|j| (j + shift) % n).collect();
        let pg = g.select_rows(&perm);
        let a = greedy_select(&g, &c, 4, 0.7).unwrap();
        let b = greedy_select(&pg, &c, 4, 0.7).unwrap();
        let mut mapped: Vec<usize> = b.retained_local_indices.iter().map(|&j| perm[j]).collect();
        mapped.sort_unstable();
        prop_assert_eq!(mapped, a.retained_local_indices);
    }
}
