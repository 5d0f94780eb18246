mod common;

use common::*;
use cycle_align::align::temporal_align_grid;
use cycle_align::cycle::soft_max;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn hard_kappa_matches_enumeration() {
    let (agree, total) = kappa_instances(500, 11);
    assert_eq!(agree, total);
}

#[test]
fn temporal_dp_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let grid: Vec<Vec<f64>> = (0..6).map(|_| (0..6).map(|_| rng.random_range(-2.0..4.0)).collect()).collect();
        let (best, count) = brute_force_alignment(&grid, 3);
        assert_eq!(count, 400);
        let dp = temporal_align_grid(&grid, 3).unwrap();
        assert_eq!(dp.total, best);
        let resum = dp.similarities.iter().fold(0.0, |a, s| a + s);
        assert_eq!(resum, dp.total);
        assert!(dp.pairs.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
    }
    for _ in 0..200 {
        let (r, c) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let k = rng.random_range(1..=r.min(c));
        let grid: Vec<Vec<f64>> = (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        assert_eq!(temporal_align_grid(&grid, k).unwrap().total, brute_force_alignment(&grid, k).0);
    }
}

#[test]
fn gamma_properties_and_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10_000 {
        let len = rng.random_range(1..=40);
        let scale = [0.1, 1.0, 2.0, 10.0][rng.random_range(0..4)];
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-scale..scale)).collect();
        let shift = rng.random_range(-5.0..5.0);
        gamma_properties(|v| soft_max(v).unwrap(), &x, shift, &mut rng).unwrap();
        let naive = naive_gamma(&x);
        assert!((soft_max(&x).unwrap() - naive).abs() <= 1e-12 * (1.0 + naive.abs()));
    }
    // Far outside the range where the naive form overflows.
    let big = [800.0, 799.0, -1e4];
    let g = soft_max(&big).unwrap();
    assert!(g.is_finite() && (799.0..=800.0).contains(&g));
    assert_eq!(soft_max(&[3.0, 3.0, 3.0]).unwrap(), 3.0);
}
