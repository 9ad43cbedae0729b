//! Baseline aggregators against independent brute-force oracles.

mod common;

use common::oracles::{self, vectors};
use fedmid::defense::{fltrust, multi_krum};

#[test]
fn random_instances_match_oracles() {
    oracles::random_instances(100, 2024).unwrap();
}

#[test]
fn rfa_matches_grid_search_in_low_dimension() {
    for seed in 0..5 {
        oracles::rfa_grid(seed).unwrap();
    }
}

#[test]
fn krum_rejects_distant_outlier_by_exhaustive_scores() {
    let rows = vec![
        vec![1.0, 1.0],
        vec![1.1, 0.9],
        vec![0.9, 1.1],
        vec![1.0, 1.05],
        vec![40.0, -40.0],
    ];
    let u = vectors(&rows);
    let (_, sel) = multi_krum(&u, 1, 4).unwrap();
    assert!(!sel.contains(&4));
}

#[test]
fn fltrust_hand_example() {
    let g = vectors(&[vec![1.0, 0.0]]).remove(0);
    let h = (0.75f64).sqrt();
    let u = vectors(&[vec![1.0, 0.0], vec![0.5, h]]);
    let (d, s) = fltrust(&u, &g).unwrap();
    assert!((s[0] - 1.0).abs() < 1e-6 && (s[1] - 0.5).abs() < 1e-6);
    let want = [(1.0 + 0.5 * 0.5) / 1.5, 0.5 * h / 1.5];
    for (g, w) in d.as_slice().iter().zip(want) {
        assert!((*g as f64 - w).abs() < 1e-5, "{g} vs {w}");
    }
}
