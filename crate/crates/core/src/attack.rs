//! Peak Suppression and Gaussian-blur kernel search.
//!
//! Peak Suppression descends `Σ_c (max f_c − mean f_c)` over the channels
//! of the deepest feature block, moving the image by raw gradient steps and
//! clamping to `[0, 1]` after each step. The blur attack never touches the
//! image: it blurs the original with a per-channel Gaussian kernel and moves
//! only the kernel's σ values so as to increase the classifier's own
//! cross-entropy on the original label. Both stop at the first label change.

use serde::{Deserialize, Serialize};

use crate::blur::{self, GaussianKernel, SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::network::{softmax_argmax, Network};
use crate::tape::{Axes, ParamId, Tape, Var};
use crate::tensor::{PaddingMode, Tensor};

pub use crate::network::evaluate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    #[serde(rename = "ps")]
    PeakSuppression,
    #[serde(rename = "blur")]
    GaussianBlur,
}

impl std::str::FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ps" => Ok(AttackMode::PeakSuppression),
            "blur" => Ok(AttackMode::GaussianBlur),
            other => Err(Error::Config(format!("unknown attack mode '{other}'"))),
        }
    }
}

impl AttackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackMode::PeakSuppression => "ps",
            AttackMode::GaussianBlur => "blur",
        }
    }
}

/// Which σ-gradient drives the blur attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SigmaGradient {
    /// Reverse mode through kernel normalization.
    #[default]
    Exact,
    /// Closed-form raw-density formula applied to `dL/dk`.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub max_iterations: usize,
    pub step_length: f64,
    pub kernel_scale: usize,
    pub sigma_init: f64,
    pub padding: PaddingMode,
    /// Layer whose output Peak Suppression flattens; `None` is the
    /// network's deepest pre-classifier block.
    pub feature_layer: Option<usize>,
    pub sigma_gradient: SigmaGradient,
    /// Targeted blur variant: descend the loss of this class instead.
    pub target: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            mode: AttackMode::PeakSuppression,
            max_iterations: 5000,
            step_length: 1.0,
            kernel_scale: 9,
            sigma_init: 10.0,
            padding: PaddingMode::Reflect,
            feature_layer: None,
            sigma_gradient: SigmaGradient::Exact,
            target: None,
        }
    }
}

impl AttackConfig {
    pub fn peak_suppression() -> Self {
        Self::default()
    }

    pub fn gaussian_blur(kernel_scale: usize, sigma_init: f64) -> Self {
        AttackConfig {
            mode: AttackMode::GaussianBlur,
            kernel_scale,
            sigma_init,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(self.step_length > 0.0) {
            return Err(Error::Config(format!("step length must be positive, got {}", self.step_length)));
        }
        if !(self.sigma_init > 0.0) {
            return Err(Error::Config(format!("sigma_init must be positive, got {}", self.sigma_init)));
        }
        if self.mode == AttackMode::GaussianBlur && self.kernel_scale % 2 == 0 {
            return Err(Error::Config(format!("kernel scale must be odd, got {}", self.kernel_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub success: bool,
    pub iterations_used: usize,
    pub original_label: usize,
    pub adversarial_label: usize,
    /// Softmax probability of `adversarial_label` at stop time.
    pub adversarial_confidence: f64,
    pub single_step_flip: bool,
    pub final_input: Tensor,
    pub final_sigmas: Option<Vec<(f64, f64)>>,
    /// Largest deepest-feature activation per evaluated input.
    pub peak_trace: Vec<f64>,
    /// Probability of the original class per evaluated input.
    pub confidence_trace: Vec<f64>,
}

/// `Σ_i |max(f_i) − mean(f_i)|` over a list of feature channels.
pub fn ps_loss(features: &[Tensor]) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::Usage("peak suppression needs at least one feature channel".into()));
    }
    Ok(features
        .iter()
        .map(|f| (f.max_value() - f.sum() / f.numel() as f64).abs())
        .sum())
}

/// Records the peak-suppression loss of a feature block; axis 0 indexes
/// channels, everything else is reduced per channel.
pub fn record_ps_loss(tape: &mut Tape, block: Var) -> Result<Var> {
    let rank = tape.value(block)?.rank();
    let axes = if rank < 2 {
        Axes::All
    } else {
        Axes::These((1..rank).collect())
    };
    let mx = tape.reduce_max(block, &axes)?;
    let mean = tape.reduce_mean(block, &axes)?;
    let gap = tape.sub(mx, mean)?;
    let gap = tape.abs(gap)?;
    tape.sum(gap)
}

pub fn clamp_image(x: &Tensor) -> Tensor {
    x.map(|v| v.clamp(0.0, 1.0))
}

fn check_image_domain(x: &Tensor) -> Result<()> {
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain("input must lie in [0, 1]".into()));
    }
    Ok(())
}

fn check_target(cfg: &AttackConfig, net: &Network, y0: usize) -> Result<()> {
    if y0 >= net.classes() {
        return Err(Error::Index(format!("label {y0} out of range for {} classes", net.classes())));
    }
    if let Some(t) = cfg.target {
        if t >= net.classes() || t == y0 {
            return Err(Error::Config(format!("invalid target class {t}")));
        }
    }
    Ok(())
}

fn flipped(label: usize, y0: usize, target: Option<usize>) -> bool {
    match target {
        Some(t) => label == t,
        None => label != y0,
    }
}

pub fn peak_suppression_attack(net: &Network, x0: &Tensor, y0: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    check_image_domain(x0)?;
    check_target(cfg, net, y0)?;
    let tap = cfg.feature_layer.unwrap_or(net.feature_tap());
    let mut x = x0.clone();
    let mut peak_trace = Vec::new();
    let mut confidence_trace = Vec::new();
    let mut iterations = 0;
    loop {
        let mut tape = Tape::new();
        let input = tape.input(x.clone())?;
        let fwd = net.forward_on_tape_at(&mut tape, input, false, tap)?;
        let (label, probs) = softmax_argmax(tape.value(fwd.logits)?.data());
        peak_trace.push(tape.value(fwd.features)?.max_value());
        confidence_trace.push(probs[y0]);
        let success = iterations > 0 && flipped(label, y0, cfg.target);
        if success || iterations == cfg.max_iterations {
            return Ok(AttackResult {
                success,
                iterations_used: iterations,
                original_label: y0,
                adversarial_label: label,
                adversarial_confidence: probs[label],
                single_step_flip: success && iterations == 1,
                final_input: x,
                final_sigmas: None,
                peak_trace,
                confidence_trace,
            });
        }
        let loss = record_ps_loss(&mut tape, fwd.features)?;
        let grad = tape.backward(loss, &[], true)?.input_grad.expect("input gradient");
        for (v, g) in x.data_mut().iter_mut().zip(grad.data()) {
            *v = (*v - cfg.step_length * g).clamp(0.0, 1.0);
        }
        iterations += 1;
    }
}

const SIGMA_PARAM: &str = "blur.sigma";
const KERNEL_PARAM: &str = "blur.kernel";

/// The image the blur attack feeds the network: `clamp(blur(x0, k(σ)))`.
/// The clamp only removes floating-point excess of a convex combination.
pub fn blurred_input(x0: &Tensor, sigmas: &[(f64, f64)], scale: usize, padding: PaddingMode) -> Result<Tensor> {
    let k = GaussianKernel::new(scale, sigmas, true)?;
    Ok(clamp_image(&blur::blur(x0, &k, padding)?))
}

pub fn gaussian_blur_attack(net: &Network, x0: &Tensor, y0: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    if cfg.kernel_scale % 2 == 0 {
        return Err(Error::Config(format!("kernel scale must be odd, got {}", cfg.kernel_scale)));
    }
    check_image_domain(x0)?;
    check_target(cfg, net, y0)?;
    if x0.rank() != 3 {
        return Err(Error::dim("gaussian_blur_attack", x0.shape(), &[0, 0, 0]));
    }
    let channels = x0.shape()[0];
    let mut sigmas = vec![(cfg.sigma_init, cfg.sigma_init); channels];
    let mut peak_trace = Vec::new();
    let mut confidence_trace = Vec::new();
    for iteration in 1..=cfg.max_iterations {
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone())?;
        let kernel = GaussianKernel::new(cfg.kernel_scale, &sigmas, true)?;
        let k = match cfg.sigma_gradient {
            SigmaGradient::Exact => {
                let s = tape.param(ParamId::from(SIGMA_PARAM), kernel.sigma_tensor())?;
                tape.gaussian_kernel(s, cfg.kernel_scale, true)?
            }
            SigmaGradient::Paper => tape.param(ParamId::from(KERNEL_PARAM), kernel.weights().clone())?,
        };
        let blurred = tape.depthwise_conv2d(x, k, cfg.padding)?;
        let blurred = tape.clamp01(blurred)?;
        let fwd = net.forward_on_tape(&mut tape, blurred, false)?;
        let (label, probs) = softmax_argmax(tape.value(fwd.logits)?.data());
        peak_trace.push(tape.value(fwd.features)?.max_value());
        confidence_trace.push(probs[y0]);
        let success = flipped(label, y0, cfg.target);
        if success || iteration == cfg.max_iterations {
            return Ok(AttackResult {
                success,
                iterations_used: iteration,
                original_label: y0,
                adversarial_label: label,
                adversarial_confidence: probs[label],
                single_step_flip: success && iteration == 1,
                final_input: tape.value(blurred)?.clone(),
                final_sigmas: Some(sigmas),
                peak_trace,
                confidence_trace,
            });
        }
        // non-targeted: L_g = -CE(y0), descending L_g ascends the original loss
        let loss = match cfg.target {
            Some(t) => tape.softmax_cross_entropy(fwd.logits, &[t])?,
            None => {
                let ce = tape.softmax_cross_entropy(fwd.logits, &[y0])?;
                tape.scale(ce, -1.0)?
            }
        };
        let grads = match cfg.sigma_gradient {
            SigmaGradient::Exact => blur::sigma_gradient_exact(&mut tape, loss, &ParamId::from(SIGMA_PARAM))?,
            SigmaGradient::Paper => {
                let id = ParamId::from(KERNEL_PARAM);
                let bundle = tape.backward(loss, std::slice::from_ref(&id), false)?;
                blur::sigma_gradient_paper(&bundle.param_grads[&id], &kernel)?
            }
        };
        let next: Vec<(f64, f64)> = sigmas
            .iter()
            .zip(&grads)
            .map(|(&(s1, s2), &(g1, g2))| {
                (
                    (s1 - cfg.step_length * g1).max(SIGMA_FLOOR),
                    (s2 - cfg.step_length * g2).max(SIGMA_FLOOR),
                )
            })
            .collect();
        if next == sigmas {
            // σ is at a floating-point fixed point: every remaining
            // iteration would evaluate the same input and fail identically.
            let remaining = cfg.max_iterations - iteration;
            let (p, c) = (*peak_trace.last().expect("traced"), *confidence_trace.last().expect("traced"));
            peak_trace.extend(std::iter::repeat(p).take(remaining));
            confidence_trace.extend(std::iter::repeat(c).take(remaining));
            return Ok(AttackResult {
                success: false,
                iterations_used: cfg.max_iterations,
                original_label: y0,
                adversarial_label: label,
                adversarial_confidence: probs[label],
                single_step_flip: false,
                final_input: blurred_input(x0, &sigmas, cfg.kernel_scale, cfg.padding)?,
                final_sigmas: Some(sigmas),
                peak_trace,
                confidence_trace,
            });
        }
        sigmas = next;
    }
    unreachable!("loop returns on its last iteration")
}

/// Dispatches on `cfg.mode`.
pub fn run_attack(net: &Network, x0: &Tensor, y0: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    match cfg.mode {
        AttackMode::PeakSuppression => peak_suppression_attack(net, x0, y0, cfg),
        AttackMode::GaussianBlur => gaussian_blur_attack(net, x0, y0, cfg),
    }
}
