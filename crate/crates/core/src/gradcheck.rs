//! Central-difference validation of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative deviation with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Evaluates `f` on a fresh tape with `x` as its input and returns the
/// scalar loss value.
pub fn evaluate<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.input(x.clone())?;
    let loss = f(&mut tape, input)?;
    let value = tape.value(loss)?;
    if value.numel() != 1 {
        return Err(Error::Usage(format!(
            "function under check must be scalar, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.data()[0])
}

/// Analytic input gradient of `f` at `x`.
pub fn analytic_gradient<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.input(x.clone())?;
    let loss = f(&mut tape, input)?;
    let bundle = tape.backward(loss, &[], true)?;
    Ok(bundle.input_grad.expect("input gradient requested"))
}

/// Central-difference gradient of any scalar function of a tensor.
pub fn numeric_gradient(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, step: f64) -> Result<Tensor> {
    if !(step > 0.0) {
        return Err(Error::Usage(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Worst elementwise relative deviation between the tape gradient of `f`
/// and its central differences at `x`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Usage(format!("finite-difference step must be positive, got {step}")));
    }
    let analytic = analytic_gradient(&f, x)?;
    let numeric = numeric_gradient(|p| evaluate(&f, p), x, step)?;
    Ok(max_relative_error(&analytic, &numeric))
}

pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, or 0 when both vanish.
pub fn norm_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic.data()).max(norm(numeric.data()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
