//! Dense row-major `f64` tensors and the raw (tape-free) numeric kernels
//! that the tape and the blur routines share.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("zero-sized dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Usage(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Channel `c` of a rank-3 `[C, H, W]` tensor as a flat slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane: usize = self.shape[1..].iter().product();
        &self.data[c * plane..(c + 1) * plane]
    }
}

/// Border rule used by the "same"-size convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Zero,
    #[default]
    Reflect,
    Circular,
}

impl PaddingMode {
    /// Maps a possibly out-of-range source index onto `0..len`, or `None`
    /// when the position reads as zero.
    #[inline]
    pub fn resolve(self, idx: isize, len: usize) -> Option<usize> {
        let n = len as isize;
        if (0..n).contains(&idx) {
            return Some(idx as usize);
        }
        match self {
            PaddingMode::Zero => None,
            PaddingMode::Circular => Some(idx.rem_euclid(n) as usize),
            PaddingMode::Reflect => {
                if n == 1 {
                    return Some(0);
                }
                // mirror without repeating the edge sample, periodic in 2(n-1)
                let period = 2 * (n - 1);
                let m = idx.rem_euclid(period);
                Some(if m < n { m } else { period - m } as usize)
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PaddingMode::Zero => "zero",
            PaddingMode::Reflect => "reflect",
            PaddingMode::Circular => "circular",
        }
    }
}

impl fmt::Display for PaddingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PaddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(PaddingMode::Zero),
            "reflect" => Ok(PaddingMode::Reflect),
            "circular" => Ok(PaddingMode::Circular),
            other => Err(Error::Config(format!("unknown padding mode '{other}'"))),
        }
    }
}

/// Padded copy of one `[H, W]` plane: `N - 1` extra rows and columns whose
/// values follow the padding mode, so every tap reads a contiguous slice.
#[derive(Debug, Clone)]
pub(crate) struct PadMap {
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
    pub h: usize,
    pub w: usize,
    pub pw: usize,
}

impl PadMap {
    pub fn new(h: usize, w: usize, n: usize, padding: PaddingMode) -> Self {
        let half = (n / 2) as isize;
        let map = |len: usize| -> Vec<Option<usize>> {
            (0..len + n - 1)
                .map(|i| padding.resolve(i as isize - half, len))
                .collect()
        };
        PadMap {
            rows: map(h),
            cols: map(w),
            h,
            w,
            pw: w + n - 1,
        }
    }

    pub fn pad(&self, src: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows.len() * self.pw];
        for (pi, r) in self.rows.iter().enumerate() {
            let Some(r) = *r else { continue };
            let srow = &src[r * self.w..(r + 1) * self.w];
            let drow = &mut out[pi * self.pw..(pi + 1) * self.pw];
            for (d, c) in drow.iter_mut().zip(&self.cols) {
                if let Some(c) = *c {
                    *d = srow[c];
                }
            }
        }
        out
    }

    /// Adjoint of [`PadMap::pad`]: folds a padded-plane gradient back
    /// onto the `[H, W]` plane it was read from.
    pub fn unpad_add(&self, padded: &[f64], dst: &mut [f64]) {
        for (pi, r) in self.rows.iter().enumerate() {
            let Some(r) = *r else { continue };
            let prow = &padded[pi * self.pw..(pi + 1) * self.pw];
            for (v, c) in prow.iter().zip(&self.cols) {
                if let Some(c) = *c {
                    dst[r * self.w + c] += v;
                }
            }
        }
    }

    /// Appends the `N²` tap views of one padded plane, each flattened to
    /// `H·W` values, in `(a, b)` row-major order.
    pub fn im2col(&self, padded: &[f64], n: usize, out: &mut Vec<f64>) {
        for a in 0..n {
            for b in 0..n {
                for i in 0..self.h {
                    let start = (i + a) * self.pw + b;
                    out.extend_from_slice(&padded[start..start + self.w]);
                }
            }
        }
    }

    /// Adjoint of [`PadMap::im2col`] for one plane.
    pub fn col2im_add(&self, cols: &[f64], n: usize, padded: &mut [f64]) {
        let hw = self.h * self.w;
        for a in 0..n {
            for b in 0..n {
                let row = &cols[(a * n + b) * hw..(a * n + b + 1) * hw];
                for i in 0..self.h {
                    let start = (i + a) * self.pw + b;
                    for (d, v) in padded[start..start + self.w].iter_mut().zip(&row[i * self.w..(i + 1) * self.w]) {
                        *d += v;
                    }
                }
            }
        }
    }

    pub fn padded_len(&self) -> usize {
        self.rows.len() * self.pw
    }
}

pub(crate) fn check_conv_config(n: usize, h: usize, w: usize, padding: PaddingMode) -> Result<()> {
    if n % 2 == 0 {
        return Err(Error::Config(format!("kernel size must be odd, got {n}")));
    }
    if padding == PaddingMode::Reflect && n > h.min(w) {
        return Err(Error::Config(format!(
            "kernel size {n} exceeds image extent {}x{} under reflect padding",
            h, w
        )));
    }
    Ok(())
}

/// `out = x · w + b` for `x: [batch, in]`, `w: [in, out]`, `b: [out]`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (xs, ws, bs) = (x.shape(), w.shape(), b.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(Error::dim("dense", xs, ws));
    }
    if bs.len() != 1 || bs[0] != ws[1] {
        return Err(Error::dim("dense bias", ws, bs));
    }
    let (batch, inputs, outputs) = (xs[0], xs[1], ws[1]);
    let mut out = Vec::with_capacity(batch * outputs);
    for r in 0..batch {
        let mut row = b.data().to_vec();
        let xr = &x.data()[r * inputs..(r + 1) * inputs];
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w.data()[k * outputs..(k + 1) * outputs];
            for (o, &wv) in row.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
        out.extend_from_slice(&row);
    }
    Tensor::new(vec![batch, outputs], out)
}

/// "Same"-size cross-correlation: `x: [C_in, H, W]`, `k: [C_out, C_in, N, N]`.
pub fn conv2d(x: &Tensor, k: &Tensor, padding: PaddingMode) -> Result<Tensor> {
    let (xs, ks) = (x.shape(), k.shape());
    if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] || ks[2] != ks[3] {
        return Err(Error::dim("conv2d", xs, ks));
    }
    let (cin, h, w) = (xs[0], xs[1], xs[2]);
    let (cout, n) = (ks[0], ks[2]);
    check_conv_config(n, h, w, padding)?;
    let map = PadMap::new(h, w, n, padding);
    let cols = conv_columns(x, &map, n);
    let q = cin * n * n;
    let mut out = vec![0.0; cout * h * w];
    for (o, plane) in out.chunks_exact_mut(h * w).enumerate() {
        for (kv, col) in k.data()[o * q..(o + 1) * q].iter().zip(cols.chunks_exact(h * w)) {
            if *kv != 0.0 {
                axpy(plane, *kv, col);
            }
        }
    }
    Tensor::new(vec![cout, h, w], out)
}

/// Per-channel "same"-size cross-correlation: `x: [C, H, W]`, `k: [C, N, N]`.
pub fn depthwise_conv2d(x: &Tensor, k: &Tensor, padding: PaddingMode) -> Result<Tensor> {
    let (xs, ks) = (x.shape(), k.shape());
    if xs.len() != 3 || ks.len() != 3 || ks[0] != xs[0] || ks[1] != ks[2] {
        return Err(Error::dim("depthwise_conv2d", xs, ks));
    }
    let (c_n, h, w) = (xs[0], xs[1], xs[2]);
    let n = ks[1];
    check_conv_config(n, h, w, padding)?;
    let map = PadMap::new(h, w, n, padding);
    let cols = conv_columns(x, &map, n);
    let taps = n * n;
    let mut out = vec![0.0; c_n * h * w];
    for (c, plane) in out.chunks_exact_mut(h * w).enumerate() {
        let ccols = &cols[c * taps * h * w..(c + 1) * taps * h * w];
        for (kv, col) in k.data()[c * taps..(c + 1) * taps].iter().zip(ccols.chunks_exact(h * w)) {
            axpy(plane, *kv, col);
        }
    }
    Tensor::new(vec![c_n, h, w], out)
}

/// `[C·N², H·W]` tap matrix of a `[C, H, W]` input.
pub(crate) fn conv_columns(x: &Tensor, map: &PadMap, n: usize) -> Vec<f64> {
    let c_n = x.shape()[0];
    let mut cols = Vec::with_capacity(c_n * n * n * map.h * map.w);
    for c in 0..c_n {
        map.im2col(&map.pad(x.channel(c)), n, &mut cols);
    }
    cols
}

/// `y += α·x`
#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// Dot product with four interleaved partial sums.
#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// 1-D "same"-size cross-correlation of a signal with an odd-length kernel.
pub fn conv1d(x: &[f64], k: &[f64], padding: PaddingMode) -> Result<Vec<f64>> {
    let n = k.len();
    if n % 2 == 0 {
        return Err(Error::Config(format!("kernel size must be odd, got {n}")));
    }
    if padding == PaddingMode::Reflect && n > x.len() {
        return Err(Error::Config(format!(
            "kernel size {n} exceeds signal length {} under reflect padding",
            x.len()
        )));
    }
    let half = (n / 2) as isize;
    Ok((0..x.len())
        .map(|i| {
            k.iter()
                .enumerate()
                .filter_map(|(a, &kv)| {
                    padding
                        .resolve(i as isize + a as isize - half, x.len())
                        .map(|j| kv * x[j])
                })
                .sum()
        })
        .collect())
}
