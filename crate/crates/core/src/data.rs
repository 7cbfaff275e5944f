//! Synthetic datasets: two nested spirals and parametric toy images.
//!
//! Every sample carries the generator's ground-truth class as its oracle
//! label. For spirals the oracle is also available as a function of the
//! point (nearest arm of the noiseless geometry).

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub input: Tensor,
    pub label: usize,
    pub oracle_label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.input.shape())
    }
}

/// Two arms `c ± r(θ)(cos θ, sin θ)` with `r` linear in θ, centered in the
/// unit square so every coordinate stays positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpiralGeometry {
    pub turns: f64,
    pub center: (f64, f64),
    pub max_radius: f64,
}

impl Default for SpiralGeometry {
    fn default() -> Self {
        SpiralGeometry {
            turns: 1.5,
            center: (0.5, 0.5),
            max_radius: 0.45,
        }
    }
}

impl SpiralGeometry {
    pub fn theta_range(&self) -> (f64, f64) {
        (0.25 * 2.0 * PI, self.turns * 2.0 * PI)
    }

    /// Point on `arm` (0 or 1) at angle θ.
    pub fn point(&self, arm: usize, theta: f64) -> (f64, f64) {
        let (_, hi) = self.theta_range();
        let r = self.max_radius * theta / hi;
        let (dx, dy) = (r * theta.cos(), r * theta.sin());
        if arm == 0 {
            (self.center.0 + dx, self.center.1 + dy)
        } else {
            (self.center.0 - dx, self.center.1 - dy)
        }
    }

    /// Distance from `p` to the noiseless arm: dense angle scan, then a
    /// ternary refinement around the best sample.
    pub fn distance_to_arm(&self, arm: usize, p: (f64, f64)) -> f64 {
        const SAMPLES: usize = 4096;
        let (lo, hi) = self.theta_range();
        let step = (hi - lo) / (SAMPLES - 1) as f64;
        let d2 = |t: f64| {
            let q = self.point(arm, t);
            (q.0 - p.0).powi(2) + (q.1 - p.1).powi(2)
        };
        let (mut best_i, mut best) = (0, f64::INFINITY);
        for i in 0..SAMPLES {
            let v = d2(lo + i as f64 * step);
            if v < best {
                best = v;
                best_i = i;
            }
        }
        let mut a = (lo + (best_i as f64 - 1.0) * step).max(lo);
        let mut b = (lo + (best_i as f64 + 1.0) * step).min(hi);
        for _ in 0..60 {
            let m1 = a + (b - a) / 3.0;
            let m2 = b - (b - a) / 3.0;
            if d2(m1) < d2(m2) {
                b = m2;
            } else {
                a = m1;
            }
        }
        best.min(d2(0.5 * (a + b))).sqrt()
    }

    /// Ground-truth class: the nearer arm (arm 0 on exact ties).
    pub fn nearest_arm(&self, p: (f64, f64)) -> usize {
        if self.distance_to_arm(1, p) < self.distance_to_arm(0, p) {
            1
        } else {
            0
        }
    }

    /// Oracle over rank-1 `[x, y]` tensors.
    pub fn oracle(&self, x: &Tensor) -> usize {
        self.nearest_arm((x.data()[0], x.data()[1]))
    }
}

/// `n_per_class` points per arm at evenly spaced angles, with isotropic
/// Gaussian positional noise. Samples alternate arm 0, arm 1.
pub fn gen_two_spirals(n_per_class: usize, noise_std: f64, geometry: SpiralGeometry, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Config("need at least one point per class".into()));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::Domain(format!("noise std must be non-negative, got {noise_std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let (lo, hi) = geometry.theta_range();
    let mut samples = Vec::with_capacity(2 * n_per_class);
    for i in 0..n_per_class {
        let theta = if n_per_class == 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (n_per_class - 1) as f64
        };
        for arm in 0..2 {
            let (mut x, mut y) = geometry.point(arm, theta);
            if noise_std > 0.0 {
                x += noise.sample(&mut rng);
                y += noise.sample(&mut rng);
            }
            let input = Tensor::new(vec![2], vec![x, y])?;
            samples.push(LabeledSample {
                input,
                label: arm,
                oracle_label: arm,
            });
        }
    }
    Ok(Dataset { samples, classes: 2 })
}

pub const IMAGE_SIZE: usize = 16;
pub const IMAGE_CHANNELS: usize = 3;
pub const PATTERN_NAMES: [&str; 5] = ["horizontal-bars", "vertical-bars", "checkers", "ring", "blob"];

/// `per_class` images for each of `classes` parametric patterns, 3×16×16,
/// values in `[0, 1]`. Foreground/background colors, phases and positions
/// are jittered per sample.
pub fn gen_toy_images(classes: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || classes > PATTERN_NAMES.len() {
        return Err(Error::Config(format!(
            "toy images support 2..={} classes, got {classes}",
            PATTERN_NAMES.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixel_noise = Normal::new(0.0, 0.03).expect("valid std");
    let mut samples = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for class in 0..classes {
            let input = render_pattern(class, &mut rng, &pixel_noise)?;
            samples.push(LabeledSample {
                input,
                label: class,
                oracle_label: class,
            });
        }
    }
    Ok(Dataset { samples, classes })
}

fn render_pattern(class: usize, rng: &mut ChaCha8Rng, pixel_noise: &Normal<f64>) -> Result<Tensor> {
    let s = IMAGE_SIZE;
    let fg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.6..1.0));
    let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.3));
    let phase_i = rng.gen_range(0..4usize);
    let phase_j = rng.gen_range(0..4usize);
    let cx = 7.5 + rng.gen_range(-2.0..2.0);
    let cy = 7.5 + rng.gen_range(-2.0..2.0);
    let radius = rng.gen_range(4.0..6.0);
    let spread = rng.gen_range(2.5..3.5);
    let mut mask = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            let (fi, fj) = (i as f64 - cy, j as f64 - cx);
            mask[i * s + j] = match class {
                0 => ((((i + phase_i) / 2) % 2) == 0) as u8 as f64,
                1 => ((((j + phase_j) / 2) % 2) == 0) as u8 as f64,
                2 => ((((i + phase_i) / 2 + (j + phase_j) / 2) % 2) == 0) as u8 as f64,
                3 => {
                    let d = (fi * fi + fj * fj).sqrt();
                    (-(d - radius).powi(2) / (2.0 * 0.8 * 0.8)).exp()
                }
                _ => (-(fi * fi + fj * fj) / (2.0 * spread * spread)).exp(),
            };
        }
    }
    let mut data = Vec::with_capacity(3 * s * s);
    for c in 0..IMAGE_CHANNELS {
        for &m in &mask {
            let v = bg[c] + (fg[c] - bg[c]) * m + pixel_noise.sample(rng);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![IMAGE_CHANNELS, s, s], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Spirals,
    Images,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spirals" => Ok(DatasetKind::Spirals),
            "images" => Ok(DatasetKind::Images),
            other => Err(Error::Config(format!("unknown dataset '{other}'"))),
        }
    }
}

/// Everything needed to regenerate the train and evaluation splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub spiral_noise: f64,
    pub spiral_geometry: SpiralGeometry,
}

impl DatasetSpec {
    pub fn spirals(seed: u64) -> Self {
        DatasetSpec {
            kind: DatasetKind::Spirals,
            seed,
            train_per_class: 200,
            test_per_class: 100,
            spiral_noise: 0.01,
            spiral_geometry: SpiralGeometry::default(),
        }
    }

    pub fn images(seed: u64) -> Self {
        DatasetSpec {
            kind: DatasetKind::Images,
            seed,
            train_per_class: 100,
            test_per_class: 50,
            spiral_noise: 0.0,
            spiral_geometry: SpiralGeometry::default(),
        }
    }

    pub fn default_for(kind: DatasetKind, seed: u64) -> Self {
        match kind {
            DatasetKind::Spirals => Self::spirals(seed),
            DatasetKind::Images => Self::images(seed),
        }
    }

    fn split_seed(&self, split: u64) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(split.wrapping_mul(0xD1B5_4A32_D192_ED03))
    }

    fn generate(&self, per_class: usize, split: u64) -> Result<Dataset> {
        match self.kind {
            DatasetKind::Spirals => gen_two_spirals(per_class, self.spiral_noise, self.spiral_geometry, self.split_seed(split)),
            DatasetKind::Images => gen_toy_images(5, per_class, self.split_seed(split)),
        }
    }

    pub fn train_set(&self) -> Result<Dataset> {
        let mut d = self.generate(self.train_per_class, 0)?;
        if self.kind == DatasetKind::Spirals {
            // evenly spaced angles: shuffle so minibatches mix radii
            d.samples.shuffle(&mut ChaCha8Rng::seed_from_u64(self.split_seed(2)));
        }
        Ok(d)
    }

    pub fn test_set(&self) -> Result<Dataset> {
        self.generate(self.test_per_class, 1)
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self.kind {
            DatasetKind::Spirals => vec![2],
            DatasetKind::Images => vec![IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE],
        }
    }
}
