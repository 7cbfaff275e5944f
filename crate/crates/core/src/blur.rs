//! Per-channel anisotropic Gaussian kernels, depthwise blurring, and the two
//! σ-gradient routes: the closed-form density derivative and the exact
//! reverse-mode gradient through kernel normalization.
//!
//! Kernel coordinates are integer `(a, b)` in `0..N`, with `a` indexing rows
//! (paired with σ₁) and `b` columns (paired with σ₂). The mean is pinned at
//! the kernel center `((N-1)/2, (N-1)/2)`.
//!
//! The raw (unnormalized) density carries an extra `1/N²` factor, i.e.
//! `A / (2π σ₁ σ₂ N²)`. It is proportional to the textbook density and its
//! σ-derivative is exactly the closed form in [`sigma_gradient_paper`].
//! Normalized kernels divide by the channel sum, so the factor cancels.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid;
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::{self, PaddingMode, Tensor};

/// Floor applied to σ during optimization (the density derivative has σ⁻⁴
/// terms).
pub const SIGMA_FLOOR: f64 = 0.05;

fn check_scale(n: usize) -> Result<()> {
    if n % 2 == 0 || n == 0 {
        return Err(Error::Config(format!("kernel scale must be odd, got {n}")));
    }
    Ok(())
}

fn check_sigma(s: f64) -> Result<()> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Domain(format!("sigma must be positive and finite, got {s}")));
    }
    Ok(())
}

/// Raw density values for one channel (row-major `N×N`).
fn raw_density(n: usize, s1: f64, s2: f64) -> Vec<f64> {
    let mu = (n as f64 - 1.0) / 2.0;
    let norm = 2.0 * PI * s1 * s2 * (n * n) as f64;
    let mut out = Vec::with_capacity(n * n);
    for a in 0..n {
        let da = a as f64 - mu;
        for b in 0..n {
            let db = b as f64 - mu;
            let e = -0.5 * (da * da / (s1 * s1) + db * db / (s2 * s2));
            out.push(e.exp() / norm);
        }
    }
    out
}

pub(crate) fn channel_weights(n: usize, s1: f64, s2: f64, normalized: bool) -> Result<Vec<f64>> {
    check_scale(n)?;
    check_sigma(s1)?;
    check_sigma(s2)?;
    let mut w = raw_density(n, s1, s2);
    if normalized {
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
    }
    Ok(w)
}

/// `(Σ u·∂k/∂σ₁, Σ u·∂k/∂σ₂)` for one channel, through normalization when
/// `normalized` is set.
pub(crate) fn channel_sigma_vjp(n: usize, s1: f64, s2: f64, normalized: bool, upstream: &[f64]) -> (f64, f64) {
    let mu = (n as f64 - 1.0) / 2.0;
    let g = raw_density(n, s1, s2);
    let (mut u_d1, mut u_d2, mut s_d1, mut s_d2, mut u_g, mut total) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for a in 0..n {
        let da2 = (a as f64 - mu).powi(2);
        for b in 0..n {
            let db2 = (b as f64 - mu).powi(2);
            let i = a * n + b;
            let d1 = g[i] * (da2 - s1 * s1) / s1.powi(3);
            let d2 = g[i] * (db2 - s2 * s2) / s2.powi(3);
            u_d1 += upstream[i] * d1;
            u_d2 += upstream[i] * d2;
            s_d1 += d1;
            s_d2 += d2;
            u_g += upstream[i] * g[i];
            total += g[i];
        }
    }
    if !normalized {
        return (u_d1, u_d2);
    }
    // k = g / S  =>  Σ u ∂k = (Σ u ∂g - (Σ u k) ∂S) / S
    let u_k = u_g / total;
    ((u_d1 - u_k * s_d1) / total, (u_d2 - u_k * s_d2) / total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    scale: usize,
    sigmas: Vec<(f64, f64)>,
    normalized: bool,
    weights: Tensor,
}

impl GaussianKernel {
    pub fn new(scale: usize, sigmas: &[(f64, f64)], normalized: bool) -> Result<Self> {
        check_scale(scale)?;
        if sigmas.is_empty() {
            return Err(Error::Config("kernel needs at least one channel".into()));
        }
        let mut data = Vec::with_capacity(sigmas.len() * scale * scale);
        for &(s1, s2) in sigmas {
            data.extend(channel_weights(scale, s1, s2, normalized)?);
        }
        Ok(GaussianKernel {
            scale,
            sigmas: sigmas.to_vec(),
            normalized,
            weights: Tensor::new(vec![sigmas.len(), scale, scale], data)?,
        })
    }

    /// Normalized kernel with `σ₁ = σ₂ = sigma` on every channel.
    pub fn isotropic(scale: usize, sigma: f64, channels: usize) -> Result<Self> {
        Self::new(scale, &vec![(sigma, sigma); channels], true)
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn channels(&self) -> usize {
        self.sigmas.len()
    }

    pub fn mean(&self) -> (f64, f64) {
        let mu = (self.scale as f64 - 1.0) / 2.0;
        (mu, mu)
    }

    pub fn sigmas(&self) -> &[(f64, f64)] {
        &self.sigmas
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn center_weight(&self, channel: usize) -> f64 {
        let n = self.scale;
        self.weights.data()[channel * n * n + (n / 2) * n + n / 2]
    }

    /// `[C, 2]` tensor of `(σ₁, σ₂)` rows.
    pub fn sigma_tensor(&self) -> Tensor {
        sigma_tensor(&self.sigmas)
    }

    pub fn to_text(&self) -> String {
        grid::to_text(&self.weights)
    }
}

pub(crate) fn sigma_tensor(sigmas: &[(f64, f64)]) -> Tensor {
    let data = sigmas.iter().flat_map(|&(a, b)| [a, b]).collect();
    Tensor::new(vec![sigmas.len(), 2], data).expect("sigma pairs")
}

/// Depthwise blur of a `[C, H, W]` image: channel `c` is filtered by
/// channel `c` of the kernel only.
pub fn blur(x: &Tensor, kernel: &GaussianKernel, padding: PaddingMode) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::dim("blur", x.shape(), kernel.weights.shape()));
    }
    if x.shape()[0] != kernel.channels() {
        return Err(Error::Config(format!(
            "kernel has {} channels but image has {}",
            kernel.channels(),
            x.shape()[0]
        )));
    }
    if !kernel.normalized {
        return Err(Error::Config("blurring requires a normalized kernel".into()));
    }
    tensor::depthwise_conv2d(x, &kernel.weights, padding)
}

/// Normalized 1-D Gaussian weights of odd length `n` centered at `(n-1)/2`.
pub fn weights_1d(n: usize, sigma: f64) -> Result<Vec<f64>> {
    check_scale(n)?;
    check_sigma(sigma)?;
    let mu = (n as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..n)
        .map(|a| (-0.5 * ((a as f64 - mu) / sigma).powi(2)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// 1-D Gaussian blur of a rank-1 signal.
pub fn blur_1d(x: &Tensor, n: usize, sigma: f64, padding: PaddingMode) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(Error::dim("blur_1d", x.shape(), &[n]));
    }
    let k = weights_1d(n, sigma)?;
    Tensor::new(x.shape().to_vec(), tensor::conv1d(x.data(), &k, padding)?)
}

/// Blur with an isotropic σ: rank-1 inputs use the 1-D kernel, rank-3
/// inputs the 2-D depthwise kernel on every channel.
pub fn blur_any(x: &Tensor, n: usize, sigma: f64, padding: PaddingMode) -> Result<Tensor> {
    match x.rank() {
        1 => blur_1d(x, n, sigma, padding),
        3 => blur(x, &GaussianKernel::isotropic(n, sigma, x.shape()[0])?, padding),
        _ => Err(Error::dim("blur", x.shape(), &[n])),
    }
}

/// The closed-form σ-gradient of the raw density, evaluated term by term:
///
/// `dL/dσ₁ = Σ_(a,b) u(a,b) · (1/N²) · ((a-μ₁)² - σ₁²) · A / (2π σ₁⁴ σ₂)`
///
/// and symmetrically for σ₂, with `A` read at the kernel coordinate `(a,b)`.
/// `upstream` is `dL/dk` with the kernel's `[C, N, N]` shape.
pub fn sigma_gradient_paper(upstream: &Tensor, kernel: &GaussianKernel) -> Result<Vec<(f64, f64)>> {
    if upstream.shape() != kernel.weights.shape() {
        return Err(Error::dim("sigma_gradient_paper", upstream.shape(), kernel.weights.shape()));
    }
    let n = kernel.scale;
    let (mu1, mu2) = kernel.mean();
    let inv_n2 = 1.0 / (n * n) as f64;
    let mut out = Vec::with_capacity(kernel.channels());
    for (c, &(s1, s2)) in kernel.sigmas.iter().enumerate() {
        let (mut g1, mut g2) = (0.0, 0.0);
        for a in 0..n {
            for b in 0..n {
                let (x, y) = (a as f64, b as f64);
                let big_a = (-0.5 * ((x - mu1).powi(2) / (s1 * s1) + (y - mu2).powi(2) / (s2 * s2))).exp();
                let u = upstream.data()[(c * n + a) * n + b];
                g1 += u * ((x - mu1).powi(2) - s1 * s1) * big_a / (2.0 * PI * s1.powi(4) * s2);
                g2 += u * ((y - mu2).powi(2) - s2 * s2) * big_a / (2.0 * PI * s1 * s2.powi(4));
            }
        }
        out.push((g1 * inv_n2, g2 * inv_n2));
    }
    Ok(out)
}

/// Records `blur(x, k(σ))` on `tape` with σ as the named parameter `id`.
/// Returns `(blurred, sigma_var)`.
pub fn record_blur(
    tape: &mut Tape,
    x: Var,
    id: ParamId,
    sigmas: &[(f64, f64)],
    scale: usize,
    padding: PaddingMode,
) -> Result<(Var, Var)> {
    let s = tape.param(id, sigma_tensor(sigmas))?;
    let k = tape.gaussian_kernel(s, scale, true)?;
    let y = tape.depthwise_conv2d(x, k, padding)?;
    Ok((y, s))
}

/// Exact `dL/dσ` per channel by reverse mode through kernel construction
/// and normalization. Consumes the tape.
pub fn sigma_gradient_exact(tape: &mut Tape, loss: Var, id: &ParamId) -> Result<Vec<(f64, f64)>> {
    let bundle = tape.backward(loss, std::slice::from_ref(id), false)?;
    let g = bundle
        .param(id)
        .ok_or_else(|| Error::Usage(format!("no gradient for '{id}'")))?;
    Ok(g.data().chunks(2).map(|p| (p[0], p[1])).collect())
}
