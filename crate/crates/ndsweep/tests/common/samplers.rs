//! Monte-Carlo sampler checks shared by the sampler suite and the
//! acceptance gate.

use super::rng;
use ndsweep::nested::{
    build_mask, keep_probability, sample_kept_count, truncated_geometric_pmf,
};

pub const N_DRAWS: usize = 1_000_000;

pub fn draw_histogram(rho: f64, s: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    let mut hist = vec![0usize; n + 1];
    for _ in 0..N_DRAWS {
        let k = sample_kept_count(rho, s, n, &mut r).unwrap();
        assert!(k > s && k <= n, "draw {k} outside ({s}, {n}]");
        hist[k] += 1;
    }
    hist
}

pub fn check_pmf(rho: f64, s: usize, n: usize, seed: u64) {
    let hist = draw_histogram(rho, s, n, seed);
    for (k, &count) in hist.iter().enumerate().skip(s + 1) {
        let p = truncated_geometric_pmf(rho, s, n, k).unwrap();
        let expected = p * N_DRAWS as f64;
        let sigma = (N_DRAWS as f64 * p * (1.0 - p)).sqrt();
        let got = count as f64;
        assert!(
            (got - expected).abs() <= 3.0 * sigma + 1.0,
            "rho={rho} s={s} n={n} k={k}: observed {got}, expected {expected} (sigma {sigma})"
        );
    }
}

pub fn check_keep_probability(rho: f64, s: usize, n: usize, seed: u64) {
    let hist = draw_histogram(rho, s, n, seed);
    // empirical P(unit i kept) = fraction of draws with k >= i
    for i in 1..=n {
        let kept: usize = hist[i..].iter().sum();
        let p = keep_probability(i, rho, s, n).unwrap();
        let expected = p * N_DRAWS as f64;
        let sigma = (N_DRAWS as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (kept as f64 - expected).abs() <= 3.0 * sigma + 1.0,
            "unit {i}: observed {kept}, expected {expected} (sigma {sigma})"
        );
    }
}

/// Chain property: the mask for k is a prefix of the mask for k+1,
/// exhaustively for all n <= max_n.
pub fn check_mask_nesting(max_n: usize) {
    for n in 1..=max_n {
        let draws: Vec<usize> = (1..=n).collect();
        let mask = build_mask(n, &draws).unwrap();
        for (row, &k) in draws.iter().enumerate() {
            let r = &mask.data()[row * n..(row + 1) * n];
            for (i, &v) in r.iter().enumerate() {
                assert_eq!(v, if i < k { 1.0 } else { 0.0 }, "n={n} k={k} i={i}");
            }
        }
        for k in 1..n {
            let a = &mask.data()[(k - 1) * n..k * n];
            let b = &mask.data()[k * n..(k + 1) * n];
            assert!(a.iter().zip(b).all(|(x, y)| x * y == *x));
        }
    }
}
