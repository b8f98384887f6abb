mod common;

use common::{direct_conv, naive_gemm, rand_tensor, rng};
use ndsweep::tensor::{col2im, gemm, im2col, ConvGeom, Tensor};
use proptest::prelude::*;

#[test]
fn gemm_matches_naive_oracle_all_transpose_combos() {
    let mut r = rng(11);
    for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
        for trial in 0..10 {
            let (m, k, n) = (7, 5, 3);
            let a_shape = if ta { [k, m] } else { [m, k] };
            let b_shape = if tb { [n, k] } else { [k, n] };
            let a = rand_tensor(&a_shape, &mut r, 2.0);
            let b = rand_tensor(&b_shape, &mut r, 2.0);
            let got = gemm(&a, &b, ta, tb).unwrap();
            let want = naive_gemm(&a, &b, ta, tb);
            assert_eq!(got.shape(), want.shape());
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!(
                    (g - w).abs() <= 1e-12 * (1.0 + w.abs()),
                    "ta={ta} tb={tb} trial={trial}: {g} vs {w}"
                );
            }
        }
    }
}

#[test]
fn gemm_f32_matches_f64_oracle() {
    let mut r = rng(12);
    let a = rand_tensor(&[7, 5], &mut r, 1.0);
    let b = rand_tensor(&[5, 3], &mut r, 1.0);
    let got = gemm(&common::to_f32(&a), &common::to_f32(&b), false, false).unwrap();
    let want = naive_gemm(&a, &b, false, false);
    for (g, w) in got.data().iter().zip(want.data()) {
        assert!((*g as f64 - w).abs() < 1e-6, "{g} vs {w}");
    }
}

#[test]
fn conv_via_gemm_matches_direct_convolution() {
    let mut r = rng(13);
    let cases = [
        // (b, c, h, w, o, kh, kw, stride, pad)
        (2, 3, 8, 8, 4, 3, 3, (1, 1), (1, 1)),
        (1, 1, 5, 7, 2, 3, 3, (2, 2), (0, 0)),
        (3, 2, 9, 9, 5, 5, 5, (2, 2), (2, 2)),
        (2, 4, 6, 6, 3, 1, 1, (1, 1), (0, 0)),
        (1, 2, 7, 5, 2, 3, 5, (2, 1), (1, 2)),
    ];
    for &(b, c, h, w, o, kh, kw, stride, pad) in &cases {
        let input = rand_tensor(&[b, c, h, w], &mut r, 1.0);
        let weights = rand_tensor(&[o, c, kh, kw], &mut r, 1.0);
        let bias = rand_tensor(&[o], &mut r, 1.0);
        let p = ndsweep::layers::ConvParams {
            weights: weights.clone(),
            bias: bias.clone(),
            geom: ConvGeom::new((kh, kw), stride, pad),
        };
        let got = ndsweep::layers::conv_forward(&input, &p).unwrap();
        let want = direct_conv(&input, &weights, &bias, stride, pad);
        assert_eq!(got.shape(), want.shape());
        for (g, v) in got.data().iter().zip(want.data()) {
            assert!((g - v).abs() < 1e-10, "{g} vs {v}");
        }
    }
}

proptest! {
    /// Adjoint identity <im2col(x), y> == <x, col2im(y)> — im2col and
    /// col2im must be exact transposes of each other as linear maps.
    #[test]
    fn im2col_col2im_adjoint_identity(
        c in 1usize..4,
        h in 3usize..9,
        w in 3usize..9,
        kh in 1usize..4,
        kw in 1usize..4,
        stride in 1usize..3,
        pad in 0usize..3,
        seed in 0u64..1000,
    ) {
        let geom = ConvGeom::new((kh, kw), (stride, stride), (pad, pad));
        // skip geometries without an integer output size
        prop_assume!(h + 2 * pad >= kh && w + 2 * pad >= kw);
        prop_assume!((h + 2 * pad - kh) % stride == 0);
        prop_assume!((w + 2 * pad - kw) % stride == 0);

        let mut r = rng(seed);
        let x = rand_tensor(&[c, h, w], &mut r, 1.0);
        let cols = im2col(&x, &geom).unwrap();
        let y = rand_tensor(cols.shape(), &mut r, 1.0);
        let back: Tensor<f64> = col2im(&y, &geom, (c, h, w)).unwrap();

        let lhs: f64 = cols.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }
}
