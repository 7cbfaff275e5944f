//! Blur manifolds: the curve `σ ↦ blur(x0, σ)` of one datum.
//!
//! Class regions are never materialized. A crossing is a change of the
//! classifier's argmax between consecutive grid points, and the
//! qualitative-change threshold σ₀ is measured against an oracle labeling
//! function that does not depend on any trained model.

use crate::blur::blur_any;
use crate::error::{Error, Result};
use crate::network::{evaluate, Network};
use crate::data::LabeledSample;
use crate::tensor::{conv1d, PaddingMode, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub sigma: f64,
    pub blurred: Tensor,
    pub predicted: usize,
    pub confidence: f64,
    pub element_sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldTrace {
    pub origin: Tensor,
    pub points: Vec<TracePoint>,
    pub padding: PaddingMode,
    pub kernel_scale: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossingReport {
    pub origin_class: usize,
    /// `(σ_low, σ_high)` around each change of prediction, in grid order.
    pub crossings: Vec<(f64, f64)>,
    pub attains_other_class: bool,
}

/// `lower` is the last grid σ whose blur the oracle still labels like the
/// original, `upper` the first one it does not (∞ if none does).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sigma0Bracket {
    pub lower: f64,
    pub upper: f64,
}

impl Sigma0Bracket {
    pub fn is_bounded(&self) -> bool {
        self.upper.is_finite()
    }
}

/// 64 log-spaced values from 0.05 to 1000.
pub fn default_sigma_grid() -> Vec<f64> {
    log_grid(0.05, 1000.0, 64)
}

pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == n - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Usage("σ grid is empty".into()));
    }
    if grid.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::Domain("σ grid values must be positive and finite".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("σ grid must be strictly increasing".into()));
    }
    Ok(())
}

pub fn trace_blur_manifold(
    x0: &Tensor,
    net: &Network,
    sigma_grid: &[f64],
    n: usize,
    padding: PaddingMode,
) -> Result<ManifoldTrace> {
    check_grid(sigma_grid)?;
    let mut points = Vec::with_capacity(sigma_grid.len());
    for &sigma in sigma_grid {
        let blurred = blur_any(x0, n, sigma, padding)?;
        let (predicted, probs) = evaluate(net, &blurred)?;
        points.push(TracePoint {
            sigma,
            element_sum: blurred.sum(),
            confidence: probs[predicted],
            predicted,
            blurred,
        });
    }
    Ok(ManifoldTrace {
        origin: x0.clone(),
        points,
        padding,
        kernel_scale: n,
    })
}

pub fn find_crossings(trace: &ManifoldTrace) -> CrossingReport {
    let origin_class = trace.points.first().map_or(0, |p| p.predicted);
    let crossings: Vec<(f64, f64)> = trace
        .points
        .windows(2)
        .filter(|w| w[0].predicted != w[1].predicted)
        .map(|w| (w[0].sigma, w[1].sigma))
        .collect();
    CrossingReport {
        origin_class,
        attains_other_class: !crossings.is_empty(),
        crossings,
    }
}

/// Oracle labels along the blur family; the first disagreement with
/// `sample.oracle_label` closes the bracket.
pub fn estimate_sigma0(
    sample: &LabeledSample,
    oracle: Option<&dyn Fn(&Tensor) -> usize>,
    sigma_grid: &[f64],
    n: usize,
    padding: PaddingMode,
) -> Result<Sigma0Bracket> {
    let oracle = oracle.ok_or_else(|| Error::Config("no oracle is defined for this dataset".into()))?;
    check_grid(sigma_grid)?;
    let mut lower = 0.0;
    for &sigma in sigma_grid {
        let blurred = blur_any(&sample.input, n, sigma, padding)?;
        if oracle(&blurred) != sample.oracle_label {
            return Ok(Sigma0Bracket { lower, upper: sigma });
        }
        lower = sigma;
    }
    Ok(Sigma0Bracket {
        lower,
        upper: f64::INFINITY,
    })
}

/// The σ → ∞ endpoint of a 1-D family: convolution with the uniform kernel.
pub fn uniform_endpoint_1d(x0: &Tensor, n: usize, padding: PaddingMode) -> Result<Tensor> {
    let k = vec![1.0 / n as f64; n];
    Tensor::new(x0.shape().to_vec(), conv1d(x0.data(), &k, padding)?)
}

fn distance_to_segment(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 == 0.0 {
        0.0
    } else {
        let dot: f64 = p.iter().zip(a).zip(&ab).map(|((p, a), d)| (p - a) * d).sum();
        (dot / len2).clamp(0.0, 1.0)
    };
    p.iter()
        .zip(a)
        .zip(&ab)
        .map(|((p, a), d)| (p - (a + t * d)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Largest Euclidean distance from a blurred point to the chord joining
/// `x0` (σ → 0) and the uniform-kernel image (σ → ∞).
pub fn line_segment_check_1d(x0: &Tensor, sigma_grid: &[f64], n: usize, padding: PaddingMode) -> Result<f64> {
    if x0.rank() != 1 {
        return Err(Error::dim("line_segment_check_1d", x0.shape(), &[x0.numel()]));
    }
    check_grid(sigma_grid)?;
    let far = uniform_endpoint_1d(x0, n, padding)?;
    let mut worst: f64 = 0.0;
    for &sigma in sigma_grid {
        let p = blur_any(x0, n, sigma, padding)?;
        worst = worst.max(distance_to_segment(p.data(), x0.data(), far.data()));
    }
    Ok(worst)
}

/// `|Σp − ΣD₀| ≤ tol·|ΣD₀|` for one traced point (absolute `tol` when the
/// origin sums to zero).
pub fn plane_membership_ok(origin_sum: f64, point_sum: f64, tol: f64) -> bool {
    let scale = if origin_sum == 0.0 { 1.0 } else { origin_sum.abs() };
    (point_sum - origin_sum).abs() <= tol * scale
}

/// Number of traced points on the origin's constant-sum plane.
pub fn plane_pass_count(trace: &ManifoldTrace, tol: f64) -> usize {
    let s0 = trace.origin.sum();
    trace
        .points
        .iter()
        .filter(|p| plane_membership_ok(s0, p.element_sum, tol))
        .count()
}

pub const TRACE_CSV_HEADER: &str = "sigma,predicted_class,element_sum,confidence";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub sigma: f64,
    pub predicted_class: usize,
    pub element_sum: f64,
    pub confidence: f64,
}

pub fn trace_to_csv(trace: &ManifoldTrace) -> String {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for p in &trace.points {
        out.push_str(&format!("{},{},{},{}\n", p.sigma, p.predicted, p.element_sum, p.confidence));
    }
    out
}

pub fn trace_from_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(TRACE_CSV_HEADER) {
        return Err(Error::Format("missing trace header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("bad trace row '{line}'")));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Format(format!("bad number '{s}'")));
            Ok(TraceRow {
                sigma: num(f[0])?,
                predicted_class: f[1].trim().parse().map_err(|_| Error::Format(format!("bad class '{}'", f[1])))?,
                element_sum: num(f[2])?,
                confidence: num(f[3])?,
            })
        })
        .collect()
}
