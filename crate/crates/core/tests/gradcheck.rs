mod common;

use blurattack::gradcheck::norm_relative_error;
use blurattack::tensor::{conv2d, dense, depthwise_conv2d};
use blurattack::{PaddingMode, Tape, Tensor};
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

macro_rules! primitive_checks {
    ($($test:ident => $idx:expr),* $(,)?) => {
        $(
            #[test]
            fn $test() {
                let (name, trial) = PRIMITIVES[$idx];
                let worst = worst_error(name, trial).unwrap();
                assert!(worst < TOLERANCE, "{name}: worst relative error {worst:e}");
            }
        )*
    };
}

primitive_checks! {
    grad_dense => 0,
    grad_conv2d => 1,
    grad_depthwise_conv2d => 2,
    grad_channel_bias => 3,
    grad_relu => 4,
    grad_max_pool2 => 5,
    grad_reshape => 6,
    grad_softmax_cross_entropy => 7,
    grad_reduce_max => 8,
    grad_reduce_mean => 9,
    grad_add => 10,
    grad_sub => 11,
    grad_mul => 12,
    grad_abs => 13,
    grad_clamp01 => 14,
    grad_sum => 15,
    grad_scale => 16,
    grad_gaussian_kernel_normalized => 17,
    grad_gaussian_kernel_raw => 18,
    grad_blur_sigma_end_to_end => 19,
}

#[test]
fn cnn_parameter_gradients_match_differences() {
    let net = probe_cnn(5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = uniform(&mut rng, &[3, 16, 16], 0.0, 1.0);
    let label = 2;
    let ids = net.param_ids();
    let mut tape = Tape::new();
    let input = tape.constant(x.clone()).unwrap();
    let fwd = net.forward_on_tape(&mut tape, input, true).unwrap();
    let loss = tape.softmax_cross_entropy(fwd.logits, &[label]).unwrap();
    let bundle = tape.backward(loss, &ids, false).unwrap();
    let loss_at = |net: &blurattack::Network| -> f64 {
        let mut tape = Tape::new();
        let input = tape.constant(x.clone()).unwrap();
        let logits = net.forward_on_tape(&mut tape, input, false).unwrap().logits;
        let l = tape.softmax_cross_entropy(logits, &[label]).unwrap();
        tape.value(l).unwrap().item().unwrap()
    };
    for id in &ids {
        let analytic = bundle.param(id).unwrap().clone();
        let mut probe = net.clone();
        let mut numeric = Vec::with_capacity(analytic.numel());
        for i in 0..analytic.numel() {
            let orig = probe.param_mut(id).unwrap().data()[i];
            probe.param_mut(id).unwrap().data_mut()[i] = orig + STEP;
            let plus = loss_at(&probe);
            probe.param_mut(id).unwrap().data_mut()[i] = orig - STEP;
            let minus = loss_at(&probe);
            probe.param_mut(id).unwrap().data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * STEP));
        }
        let numeric = Tensor::new(analytic.shape().to_vec(), numeric).unwrap();
        let err = norm_relative_error(&analytic, &numeric);
        assert!(err < TOLERANCE, "{id}: relative error {err:e}");
    }
}

fn brute_matmul(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = b.data()[j];
            for l in 0..k {
                acc += x.data()[i * k + l] * w.data()[l * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Direct circular cross-correlation with wrapped indices.
fn brute_circular_conv(x: &Tensor, k: &Tensor) -> Vec<f64> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, n) = (k.shape()[0], k.shape()[2]);
    let half = (n / 2) as i64;
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for c in 0..cin {
                    for a in 0..n {
                        for bb in 0..n {
                            let r = (i as i64 + a as i64 - half).rem_euclid(h as i64) as usize;
                            let s = (j as i64 + bb as i64 - half).rem_euclid(w as i64) as usize;
                            acc += k.data()[((o * cin + c) * n + a) * n + bb] * x.data()[(c * h + r) * w + s];
                        }
                    }
                }
                out[(o * h + i) * w + j] = acc;
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn dense_matches_brute_force(seed in any::<u64>(), m in 1usize..4, k in 1usize..6, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, &[m, k], -1.0, 1.0);
        let w = uniform(&mut rng, &[k, n], -1.0, 1.0);
        let b = uniform(&mut rng, &[n], -1.0, 1.0);
        let got = dense(&x, &w, &b).unwrap();
        prop_assert!(max_diff(got.data(), &brute_matmul(&x, &w, &b)) < 1e-12);
    }

    #[test]
    fn circular_conv_matches_brute_force(seed in any::<u64>(), h in 1usize..7, w in 1usize..7, half in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * half + 1;
        let x = uniform(&mut rng, &[2, h, w], -1.0, 1.0);
        let k = uniform(&mut rng, &[3, 2, n, n], -1.0, 1.0);
        let got = conv2d(&x, &k, PaddingMode::Circular).unwrap();
        prop_assert!(max_diff(got.data(), &brute_circular_conv(&x, &k)) < 1e-12);
    }

    #[test]
    fn depthwise_is_diagonal_conv(seed in any::<u64>(), half in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * half + 1;
        let x = uniform(&mut rng, &[3, 6, 5], -1.0, 1.0);
        let k = uniform(&mut rng, &[3, n, n], -1.0, 1.0);
        let full = Tensor::from_fn(&[3, 3, n, n], |i| {
            let (o, c, t) = (i / (3 * n * n), (i / (n * n)) % 3, i % (n * n));
            if o == c { k.data()[o * n * n + t] } else { 0.0 }
        });
        for padding in PADDINGS {
            if padding == PaddingMode::Reflect && n > 5 {
                continue;
            }
            let a = depthwise_conv2d(&x, &k, padding).unwrap();
            let b = conv2d(&x, &full, padding).unwrap();
            prop_assert!(max_diff(a.data(), b.data()) < 1e-12);
        }
    }
}

