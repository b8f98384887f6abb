//! Finite-difference gradient checks shared by the gradient suite and
//! the acceptance gate.

use super::{assert_grads_close, finite_diff, rand_tensor, rng};
use ndsweep::layers::{
    conv_backward, conv_forward, fc_backward, fc_forward, maxpool_backward, maxpool_forward,
    relu_backward, relu_forward, softmax_xent, standard_dropout, standard_dropout_backward,
    ConvParams, FcParams,
};
use ndsweep::nested::{nd_backward, nd_forward_with_draws, NestedDropoutState};
use ndsweep::tensor::{ConvGeom, Tensor};
use rand::Rng;

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}



pub fn conv_gradients(trials: usize) {
    let mut r = rng(21);
    for trial in 0..trials {
        let (b, c, o) = (
            r.gen_range(1..3usize),
            r.gen_range(1..4usize),
            r.gen_range(1..4usize),
        );
        // geometry from a table so the output size is always integral
        let (k, stride, pad, h, w) = match trial % 4 {
            0 => (3, 1, 1, r.gen_range(4..7), r.gen_range(4..7)),
            1 => (3, 1, 0, r.gen_range(4..7), r.gen_range(4..7)),
            2 => (3, 2, 1, 5, 7),
            _ => (1, 1, 0, r.gen_range(3..6), r.gen_range(3..6)),
        };
        let input = rand_tensor(&[b, c, h, w], &mut r, 1.0);
        let p = ConvParams {
            weights: rand_tensor(&[o, c, k, k], &mut r, 1.0),
            bias: rand_tensor(&[o], &mut r, 1.0),
            geom: ConvGeom::new((k, k), (stride, stride), (pad, pad)),
        };
        let out = conv_forward(&input, &p).unwrap();
        let coeff = rand_tensor(out.shape(), &mut r, 1.0);
        let grads = conv_backward(&input, &p, &coeff).unwrap();

        let fd_in = finite_diff(
            &mut |x| {
                let t = Tensor::from_vec(input.shape(), x.to_vec()).unwrap();
                dot(&conv_forward(&t, &p).unwrap(), &coeff)
            },
            input.data(),
        );
        assert_grads_close(grads.grad_input.data(), &fd_in, "conv grad_input");

        let fd_w = finite_diff(
            &mut |wd| {
                let q = ConvParams {
                    weights: Tensor::from_vec(p.weights.shape(), wd.to_vec()).unwrap(),
                    bias: p.bias.clone(),
                    geom: p.geom,
                };
                dot(&conv_forward(&input, &q).unwrap(), &coeff)
            },
            p.weights.data(),
        );
        assert_grads_close(grads.grad_weights.data(), &fd_w, "conv grad_weights");

        let fd_b = finite_diff(
            &mut |bd| {
                let q = ConvParams {
                    weights: p.weights.clone(),
                    bias: Tensor::from_vec(p.bias.shape(), bd.to_vec()).unwrap(),
                    geom: p.geom,
                };
                dot(&conv_forward(&input, &q).unwrap(), &coeff)
            },
            p.bias.data(),
        );
        assert_grads_close(grads.grad_bias.data(), &fd_b, "conv grad_bias");
    }
}

pub fn fc_gradients(trials: usize) {
    let mut r = rng(22);
    for _ in 0..trials {
        let (b, n_in, n_out) = (
            r.gen_range(1..5usize),
            r.gen_range(2..8usize),
            r.gen_range(2..6usize),
        );
        let input = rand_tensor(&[b, n_in], &mut r, 1.0);
        let p = FcParams {
            weights: rand_tensor(&[n_out, n_in], &mut r, 1.0),
            bias: rand_tensor(&[n_out], &mut r, 1.0),
        };
        let out = fc_forward(&input, &p).unwrap();
        let coeff = rand_tensor(out.shape(), &mut r, 1.0);
        let grads = fc_backward(&input, &p, &coeff).unwrap();

        let fd_in = finite_diff(
            &mut |x| {
                let t = Tensor::from_vec(input.shape(), x.to_vec()).unwrap();
                dot(&fc_forward(&t, &p).unwrap(), &coeff)
            },
            input.data(),
        );
        assert_grads_close(grads.grad_input.data(), &fd_in, "fc grad_input");

        let fd_w = finite_diff(
            &mut |wd| {
                let q = FcParams {
                    weights: Tensor::from_vec(p.weights.shape(), wd.to_vec()).unwrap(),
                    bias: p.bias.clone(),
                };
                dot(&fc_forward(&input, &q).unwrap(), &coeff)
            },
            p.weights.data(),
        );
        assert_grads_close(grads.grad_weights.data(), &fd_w, "fc grad_weights");

        let fd_b = finite_diff(
            &mut |bd| {
                let q = FcParams {
                    weights: p.weights.clone(),
                    bias: Tensor::from_vec(p.bias.shape(), bd.to_vec()).unwrap(),
                };
                dot(&fc_forward(&input, &q).unwrap(), &coeff)
            },
            p.bias.data(),
        );
        assert_grads_close(grads.grad_bias.data(), &fd_b, "fc grad_bias");
    }
}

pub fn relu_gradient(trials: usize) {
    let mut r = rng(23);
    for _ in 0..trials {
        let shape = [r.gen_range(1..3usize), r.gen_range(2..10usize)];
        // push values away from the kink so FD is valid
        let input = rand_tensor(&shape, &mut r, 1.0)
            .map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 });
        let coeff = rand_tensor(&shape, &mut r, 1.0);
        let grad = relu_backward(&input, &coeff).unwrap();
        let fd = finite_diff(
            &mut |x| {
                let t = Tensor::from_vec(&shape, x.to_vec()).unwrap();
                dot(&relu_forward(&t), &coeff)
            },
            input.data(),
        );
        assert_grads_close(grad.data(), &fd, "relu grad");
    }
}

pub fn maxpool_gradient(trials: usize) {
    let mut r = rng(24);
    for trial in 0..trials {
        let (b, c) = (r.gen_range(1..3usize), r.gen_range(1..3usize));
        let (h, w, win, stride) = if trial % 2 == 0 {
            (6, 6, (2, 2), (2, 2))
        } else {
            (7, 7, (3, 3), (2, 2))
        };
        // distinct well-separated values so no FD step can flip an argmax
        let n = b * c * h * w;
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        use rand::seq::SliceRandom;
        vals.shuffle(&mut r);
        let input = Tensor::from_vec(&[b, c, h, w], vals).unwrap();

        let (out, argmax) = maxpool_forward(&input, win, stride).unwrap();
        let coeff = rand_tensor(out.shape(), &mut r, 1.0);
        let grad = maxpool_backward(&argmax, &coeff, input.shape()).unwrap();
        let fd = finite_diff(
            &mut |x| {
                let t = Tensor::from_vec(input.shape(), x.to_vec()).unwrap();
                dot(&maxpool_forward(&t, win, stride).unwrap().0, &coeff)
            },
            input.data(),
        );
        assert_grads_close(grad.data(), &fd, "maxpool grad");
    }
}

pub fn softmax_gradient(trials: usize) {
    let mut r = rng(25);
    for _ in 0..trials {
        let (b, classes) = (r.gen_range(1..6usize), r.gen_range(2..11usize));
        let logits = rand_tensor(&[b, classes], &mut r, 3.0);
        let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..classes)).collect();
        let (_, grad) = softmax_xent(&logits, &labels).unwrap();
        let fd = finite_diff(
            &mut |x| {
                let t = Tensor::from_vec(logits.shape(), x.to_vec()).unwrap();
                softmax_xent(&t, &labels).unwrap().0
            },
            logits.data(),
        );
        assert_grads_close(grad.data(), &fd, "softmax-xent grad");
    }
}

pub fn nested_dropout_gradient(trials: usize) {
    let mut r = rng(26);
    for _ in 0..trials {
        let (b, c, n) = (r.gen_range(1..3usize), r.gen_range(1..3usize), 4usize);
        let (h, w) = (r.gen_range(4..6usize), r.gen_range(4..6usize));
        let input = rand_tensor(&[b, c, h, w], &mut r, 1.0);
        let p = ConvParams {
            weights: rand_tensor(&[n, c, 3, 3], &mut r, 1.0),
            bias: rand_tensor(&[n], &mut r, 1.0),
            geom: ConvGeom::new((3, 3), (1, 1), (1, 1)),
        };
        let draws: Vec<usize> = (0..b).map(|_| r.gen_range(1..=n)).collect();
        let mut state = NestedDropoutState::new(n, 0.2).unwrap();

        let conv_out = conv_forward(&input, &p).unwrap();
        let masked = nd_forward_with_draws(&conv_out, &mut state, &draws).unwrap();
        let coeff = rand_tensor(masked.shape(), &mut r, 1.0);

        let grad_mid = nd_backward(&coeff, &state).unwrap();
        let grads = conv_backward(&input, &p, &grad_mid).unwrap();

        let forward = |inp: &Tensor<f64>, q: &ConvParams<f64>| {
            let out = conv_forward(inp, q).unwrap();
            let mut st = NestedDropoutState::new(n, 0.2).unwrap();
            dot(&nd_forward_with_draws(&out, &mut st, &draws).unwrap(), &coeff)
        };

        let fd_in = finite_diff(
            &mut |x| {
                let t = Tensor::from_vec(input.shape(), x.to_vec()).unwrap();
                forward(&t, &p)
            },
            input.data(),
        );
        assert_grads_close(grads.grad_input.data(), &fd_in, "conv+nd grad_input");

        let fd_w = finite_diff(
            &mut |wd| {
                let q = ConvParams {
                    weights: Tensor::from_vec(p.weights.shape(), wd.to_vec()).unwrap(),
                    bias: p.bias.clone(),
                    geom: p.geom,
                };
                forward(&input, &q)
            },
            p.weights.data(),
        );
        assert_grads_close(grads.grad_weights.data(), &fd_w, "conv+nd grad_weights");

        // dropped channels must get exactly zero weight gradient
        let min_k = *draws.iter().min().unwrap();
        let per_filter = p.weights.len() / n;
        if draws.iter().all(|&k| k == min_k) && min_k < n {
            let tail = &grads.grad_weights.data()[min_k * per_filter..];
            assert!(tail.iter().all(|&g| g == 0.0));
        }
    }
}

pub fn standard_dropout_consistency(trials: usize) {
    let mut r = rng(27);
    for _ in 0..trials {
        let shape = [2usize, r.gen_range(3..9usize)];
        let input = rand_tensor(&shape, &mut r, 1.0);
        let p = 0.4;
        let (_, mask) = standard_dropout(&input, p, &mut r, true).unwrap();
        let coeff = rand_tensor(&shape, &mut r, 1.0);
        let grad = standard_dropout_backward(&coeff, &mask, p, true).unwrap();
        let fd = finite_diff(
            &mut |x| {
                // replay the same mask with inverted scaling
                x.iter()
                    .zip(mask.data())
                    .zip(coeff.data())
                    .map(|((v, m), c)| v * m / (1.0 - p) * c)
                    .sum()
            },
            input.data(),
        );
        assert_grads_close(grad.data(), &fd, "dropout grad");
    }
}
