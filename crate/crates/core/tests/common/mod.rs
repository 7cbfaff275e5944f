#![allow(dead_code)]

use blurattack::gradcheck::{analytic_gradient, evaluate, norm_relative_error, numeric_gradient};
use blurattack::network::build_toy_cnn;
use blurattack::{Axes, Network, PaddingMode, Result, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const TRIALS: usize = 100;

pub const PADDINGS: [PaddingMode; 3] = [PaddingMode::Zero, PaddingMode::Reflect, PaddingMode::Circular];

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero by `gap`, with random signs.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Pairwise distinct values at least `1 / (2·numel)` apart.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let jitter: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.25)).collect();
    Tensor::from_fn(shape, |i| (order[i] as f64 + jitter[i]) / n as f64 * 2.0 - 1.0)
}

/// Relative error of the tape gradient of `Σ r ⊙ op(x)` with respect to
/// the input leaf `x`.
pub fn check<F>(op: F, x: &Tensor, r: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let f = |tape: &mut Tape, x: Var| -> Result<Var> {
        let y = op(tape, x)?;
        let w = tape.constant(r.clone())?;
        let p = tape.mul(y, w)?;
        tape.sum(p)
    };
    let a = analytic_gradient(&f, x)?;
    let n = numeric_gradient(|p| evaluate(&f, p), x, STEP)?;
    Ok(norm_relative_error(&a, &n))
}

fn weights_for(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

pub type Trial = fn(&mut ChaCha8Rng, usize) -> Result<f64>;

fn dense(rng: &mut ChaCha8Rng, t: usize) -> Result<f64> {
    let x = uniform(rng, &[2, 5], -1.0, 1.0);
    let w = uniform(rng, &[5, 3], -1.0, 1.0);
    let b = uniform(rng, &[3], -1.0, 1.0);
    let r = weights_for(rng, &[2, 3]);
    Ok(match t % 3 {
        0 => check(
            |tp, v| {
                let (w, b) = (tp.constant(w.clone())?, tp.constant(b.clone())?);
                tp.dense(v, w, b)
            },
            &x,
            &r,
        )?,
        1 => check(
            |tp, v| {
                let (x, b) = (tp.constant(x.clone())?, tp.constant(b.clone())?);
                tp.dense(x, v, b)
            },
            &w,
            &r,
        )?,
        _ => check(
            |tp, v| {
                let (x, w) = (tp.constant(x.clone())?, tp.constant(w.clone())?);
                tp.dense(x, w, v)
            },
            &b,
            &r,
        )?,
    })
}

fn conv2d(rng: &mut ChaCha8Rng, t: usize) -> Result<f64> {
    let padding = PADDINGS[t % 3];
    let x = uniform(rng, &[2, 6, 7], -1.0, 1.0);
    let k = uniform(rng, &[3, 2, 3, 3], -1.0, 1.0);
    let r = weights_for(rng, &[3, 6, 7]);
    if t % 2 == 0 {
        check(
            |tp, v| {
                let k = tp.constant(k.clone())?;
                tp.conv2d(v, k, padding)
            },
            &x,
            &r,
        )
    } else {
        check(
            |tp, v| {
                let x = tp.constant(x.clone())?;
                tp.conv2d(x, v, padding)
            },
            &k,
            &r,
        )
    }
}

fn depthwise(rng: &mut ChaCha8Rng, t: usize) -> Result<f64> {
    let padding = PADDINGS[t % 3];
    let n = [1, 3, 5][t % 3];
    let x = uniform(rng, &[3, 6, 6], -1.0, 1.0);
    let k = uniform(rng, &[3, n, n], -1.0, 1.0);
    let r = weights_for(rng, &[3, 6, 6]);
    if t % 2 == 0 {
        check(
            |tp, v| {
                let k = tp.constant(k.clone())?;
                tp.depthwise_conv2d(v, k, padding)
            },
            &x,
            &r,
        )
    } else {
        check(
            |tp, v| {
                let x = tp.constant(x.clone())?;
                tp.depthwise_conv2d(x, v, padding)
            },
            &k,
            &r,
        )
    }
}

fn channel_bias(rng: &mut ChaCha8Rng, t: usize) -> Result<f64> {
    let x = uniform(rng, &[3, 4, 4], -1.0, 1.0);
    let b = uniform(rng, &[3], -1.0, 1.0);
    let r = weights_for(rng, &[3, 4, 4]);
    if t % 2 == 0 {
        check(
            |tp, v| {
                let b = tp.constant(b.clone())?;
                tp.channel_bias(v, b)
            },
            &x,
            &r,
        )
    } else {
        check(
            |tp, v| {
                let x = tp.constant(x.clone())?;
                tp.channel_bias(x, v)
            },
            &b,
            &r,
        )
    }
}

fn relu(rng: &mut ChaCha8Rng, _: usize) -> Result<f64> {
    let x = away_from_zero(rng, &[4, 5], 0.05);
    let r = weights_for(rng, &[4, 5]);
    check(|tp, v| tp.relu(v), &x, &r)
}

fn max_pool2(rng: &mut ChaCha8Rng, _: usize) -> Result<f64> {
    let x = distinct(rng, &[2, 4, 6]);
    let r = weights_for(rng, &[2, 2, 3]);
    check(|tp, v| tp.max_pool2(v), &x, &r)
}

fn reshape(rng: &mut ChaCha8Rng, _: usize) -> Result<f64> {
    let x = uniform(rng, &[2, 3, 4], -1.0, 1.0);
    let r = weights_for(rng, &[6, 4]);
    check(|tp, v| tp.reshape(v, &[6, 4]), &x, &r)
}

fn softmax_cross_entropy(rng: &mut ChaCha8Rng, _: usize) -> Result<f64> {
    let x = uniform(rng, &[3, 5], -3.0, 3.0);
    let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
    let r = Tensor::filled(&[1], rng.gen_range(0.5..2.0));
    check(|tp, v| tp.softmax_cross_entropy(v, &labels), &x, &r)
}

fn reduce_max(rng: &mut ChaCha8Rng, t: usize) -> Result<f64> {
    let x = distinct(rng, &[3, 4]);
    if t % 2 == 0 {
        let r = weights_for(rng, &[1]);
        check(|tp, v| tp.reduce_max(v, &Axes::All), &x, &r)
    } else {
        let r = weights_for(rng, &[3]);
        check(|tp, v| tp.reduce_max(v, &Axes::These(vec![1])), &x, &r)
    }
}

fn reduce_mean(rng: &mut ChaCha8Rng, t: usize) -> Result<f64> {
    let x = uniform(rng, &[3, 4, 2], -1.0, 1.0);
    if t % 2 == 0 {
        let r = weights_for(rng, &[1]);
        check(|tp, v| tp.reduce_mean(v, &Axes::All), &x, &r)
    } else {
        let r = weights_for(rng, &[3]);
        check(|tp, v| tp.reduce_mean(v, &Axes::These(vec![1, 2])), &x, &r)
    }
}

fn binary(rng: &mut ChaCha8Rng, t: usize, which: usize) -> Result<f64> {
    let a = uniform(rng, &[3, 4], -1.0, 1.0);
    let b = uniform(rng, &[3, 4], -1.0, 1.0);
    let r = weights_for(rng, &[3, 4]);
    let apply = move |tp: &mut Tape, x: Var, y: Var| match which {
        0 => tp.add(x, y),
        1 => tp.sub(x, y),
        _ => tp.mul(x, y),
    };
    if t % 2 == 0 {
        check(
            |tp, v| {
                let b = tp.constant(b.clone())?;
                apply(tp, v, b)
            },
            &a,
            &r,
        )
    } else {
        check(
            |tp, v| {
                let a = tp.constant(a.clone())?;
                apply(tp, a, v)
            },
            &b,
            &r,
        )
    }
}

fn add(rng: &mut ChaCha8Rng, t: usize) -> Result<f64> {
    binary(rng, t, 0)
}

fn sub(rng: &mut ChaCha8Rng, t: usize) -> Result<f64> {
    binary(rng, t, 1)
}

fn mul(rng: &mut ChaCha8Rng, t: usize) -> Result<f64> {
    binary(rng, t, 2)
}

fn abs(rng: &mut ChaCha8Rng, _: usize) -> Result<f64> {
    let x = away_from_zero(rng, &[4, 5], 0.05);
    let r = weights_for(rng, &[4, 5]);
    check(|tp, v| tp.abs(v), &x, &r)
}

fn clamp01(rng: &mut ChaCha8Rng, _: usize) -> Result<f64> {
    let x = Tensor::from_fn(&[4, 5], |_| match rng.gen_range(0..3) {
        0 => rng.gen_range(-0.5..-0.05),
        1 => rng.gen_range(0.05..0.95),
        _ => rng.gen_range(1.05..1.5),
    });
    let r = weights_for(rng, &[4, 5]);
    check(|tp, v| tp.clamp01(v), &x, &r)
}

fn sum(rng: &mut ChaCha8Rng, _: usize) -> Result<f64> {
    let x = uniform(rng, &[3, 5], -1.0, 1.0);
    let r = weights_for(rng, &[1]);
    check(|tp, v| tp.sum(v), &x, &r)
}

fn scale(rng: &mut ChaCha8Rng, _: usize) -> Result<f64> {
    let x = uniform(rng, &[3, 5], -1.0, 1.0);
    let s = rng.gen_range(-3.0..3.0);
    let r = weights_for(rng, &[3, 5]);
    check(|tp, v| tp.scale(v, s), &x, &r)
}

fn kernel_trial(rng: &mut ChaCha8Rng, t: usize, normalized: bool) -> Result<f64> {
    let n = [3, 5, 7, 9][t % 4];
    let c = 1 + t % 3;
    let sig = uniform(rng, &[c, 2], 0.5, 10.0);
    let r = weights_for(rng, &[c, n, n]);
    check(|tp, v| tp.gaussian_kernel(v, n, normalized), &sig, &r)
}

fn gaussian_kernel_normalized(rng: &mut ChaCha8Rng, t: usize) -> Result<f64> {
    kernel_trial(rng, t, true)
}

fn gaussian_kernel_raw(rng: &mut ChaCha8Rng, t: usize) -> Result<f64> {
    kernel_trial(rng, t, false)
}

pub const PRIMITIVES: [(&str, Trial); 20] = [
    ("dense", dense),
    ("conv2d", conv2d),
    ("depthwise_conv2d", depthwise),
    ("channel_bias", channel_bias),
    ("relu", relu),
    ("max_pool2", max_pool2),
    ("reshape", reshape),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("reduce_max", reduce_max),
    ("reduce_mean", reduce_mean),
    ("add", add),
    ("sub", sub),
    ("mul", mul),
    ("abs", abs),
    ("clamp01", clamp01),
    ("sum", sum),
    ("scale", scale),
    ("gaussian_kernel (normalized)", gaussian_kernel_normalized),
    ("gaussian_kernel (raw)", gaussian_kernel_raw),
    ("blur attack σ-gradient", blur_sigma_end_to_end),
];

/// Small randomly initialized CNN shared by the end-to-end σ trials.
pub fn probe_cnn(seed: u64) -> Network {
    build_toy_cnn([3, 16, 16], [8, 12, 12], 5, seed).expect("valid architecture")
}

/// The blur attack's objective `−CE(net(clamp(blur(x0, k(σ)))), y)` as a
/// function of the `[C, 2]` σ tensor.
pub fn blur_attack_objective<'a>(
    net: &'a Network,
    x0: &Tensor,
    label: usize,
    n: usize,
    padding: PaddingMode,
) -> impl Fn(&mut Tape, Var) -> Result<Var> + 'a {
    let x0 = x0.clone();
    move |tp: &mut Tape, s: Var| {
        let x = tp.constant(x0.clone())?;
        let k = tp.gaussian_kernel(s, n, true)?;
        let y = tp.depthwise_conv2d(x, k, padding)?;
        let y = tp.clamp01(y)?;
        let logits = net.forward_on_tape(tp, y, false)?.logits;
        let ce = tp.softmax_cross_entropy(logits, &[label])?;
        tp.scale(ce, -1.0)
    }
}

fn blur_sigma_end_to_end(rng: &mut ChaCha8Rng, t: usize) -> Result<f64> {
    let net = probe_cnn(1000 + t as u64);
    let n = [3, 5, 7, 9][t % 4];
    let padding = PADDINGS[t % 3];
    let x0 = uniform(rng, &[3, 16, 16], 0.05, 0.95);
    let sig = uniform(rng, &[3, 2], 0.5, 10.0);
    let label = rng.gen_range(0..5);
    let f = blur_attack_objective(&net, &x0, label, n, padding);
    let mut sig = sig;
    for _ in 0..KINK_REDRAWS {
        let num = numeric_gradient(|p| evaluate(&f, p), &sig, STEP)?;
        let half = numeric_gradient(|p| evaluate(&f, p), &sig, STEP / 2.0)?;
        if norm_relative_error(&num, &half) < TOLERANCE / 10.0 {
            let a = analytic_gradient(&f, &sig)?;
            return Ok(norm_relative_error(&a, &num));
        }
        sig = uniform(rng, &[3, 2], 0.5, 10.0);
    }
    Err(blurattack::Error::Usage("no smooth σ found for end-to-end check".into()))
}

/// Redraws allowed when a σ sample straddles a ReLU or max-pool kink of the
/// random network within the difference step.
const KINK_REDRAWS: usize = 8;

/// Worst relative error over `TRIALS` seeded trials of one primitive.
pub fn worst_error(name: &str, trial: Trial) -> Result<f64> {
    let seed = name.bytes().fold(0xC0FFEEu64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for t in 0..TRIALS {
        worst = worst.max(trial(&mut rng, t)?);
    }
    Ok(worst)
}
