//! Shared oracles for the integration tests: a naive matrix multiply,
//! a direct (un-lowered) convolution, and a central finite-difference
//! gradient checker. All deliberately written in the dumbest possible
//! way so they cannot share a bug with the library implementations.

#![allow(dead_code)]

pub mod grads;
pub mod samplers;

use ndsweep::data::{synth, Dataset, DatasetMeta};
use ndsweep::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Synthetic digit dataset held in memory, for training tests.
pub fn tiny_dataset(n: usize, seed: u64) -> Dataset {
    let (imgs, labels) = synth::generate(n, seed);
    Dataset {
        images: Tensor::from_vec(
            &[n, 1, 28, 28],
            imgs.iter().map(|&b| b as f32 / 255.0).collect(),
        )
        .unwrap(),
        labels: labels.iter().map(|&l| l as usize).collect(),
        meta: DatasetMeta {
            source: "synth".into(),
            scale: 255.0,
            mean_image: None,
        },
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng, scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn to_f32(t: &Tensor<f64>) -> Tensor<f32> {
    Tensor::from_vec(
        t.shape(),
        t.data().iter().map(|&v| v as f32).collect(),
    )
    .unwrap()
}

/// Triple-loop matrix multiply with explicit index arithmetic and a
/// different loop order (i-j-k) than the library's i-k-j kernel.
pub fn naive_gemm(
    a: &Tensor<f64>,
    b: &Tensor<f64>,
    transpose_a: bool,
    transpose_b: bool,
) -> Tensor<f64> {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if transpose_a { (ac, ar) } else { (ar, ac) };
    let n = if transpose_b { br } else { bc };
    let get_a = |i: usize, p: usize| {
        if transpose_a {
            a.data()[p * ac + i]
        } else {
            a.data()[i * ac + p]
        }
    };
    let get_b = |p: usize, j: usize| {
        if transpose_b {
            b.data()[j * bc + p]
        } else {
            b.data()[p * bc + j]
        }
    };
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += get_a(i, p) * get_b(p, j);
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::from_vec(&[m, n], out).unwrap()
}

/// Direct convolution: six nested loops over output position and kernel
/// window, with explicit zero padding. Input `[B, C, H, W]`, weights
/// `[O, C, kh, kw]`, bias `[O]`.
#[allow(clippy::too_many_arguments)]
pub fn direct_conv(
    input: &Tensor<f64>,
    weights: &Tensor<f64>,
    bias: &Tensor<f64>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Tensor<f64> {
    let [b, c, h, w] = *input.shape() else { panic!() };
    let [o, wc, kh, kw] = *weights.shape() else { panic!() };
    assert_eq!(c, wc);
    let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let wo = (w + 2 * pad.1 - kw) / stride.1 + 1;
    let mut out = vec![0.0f64; b * o * ho * wo];
    for bi in 0..b {
        for oi in 0..o {
            for yo in 0..ho {
                for xo in 0..wo {
                    let mut acc = bias.data()[oi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let yi = (yo * stride.0 + ky) as isize - pad.0 as isize;
                                let xi = (xo * stride.1 + kx) as isize - pad.1 as isize;
                                if yi < 0 || xi < 0 || yi >= h as isize || xi >= w as isize {
                                    continue;
                                }
                                let iv = input.data()
                                    [((bi * c + ci) * h + yi as usize) * w + xi as usize];
                                let wv =
                                    weights.data()[((oi * c + ci) * kh + ky) * kw + kx];
                                acc += iv * wv;
                            }
                        }
                    }
                    out[((bi * o + oi) * ho + yo) * wo + xo] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[b, o, ho, wo], out).unwrap()
}

pub const FD_EPS: f64 = 1e-5;

/// Central finite differences of a scalar function at `x`.
pub fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + FD_EPS;
        let up = f(&probe);
        probe[i] = x[i] - FD_EPS;
        let down = f(&probe);
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * FD_EPS));
    }
    grad
}

/// Max relative error between analytic and numeric gradients, skipping
/// entries where both are essentially zero.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let scale = a.abs() + n.abs();
        if scale < 1e-8 {
            continue;
        }
        worst = worst.max((a - n).abs() / scale);
    }
    worst
}

pub fn assert_grads_close(analytic: &[f64], numeric: &[f64], what: &str) {
    let err = max_rel_err(analytic, numeric);
    assert!(err < 1e-4, "{what}: max relative error {err}");
}
