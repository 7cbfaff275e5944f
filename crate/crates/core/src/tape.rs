//! Explicit, per-run reverse-mode tape.
//!
//! Every primitive evaluates eagerly, appends one node that references its
//! operands by index, and saves whatever its backward rule needs. A tape
//! serves exactly one backward pass; afterwards it is marked consumed.
//!
//! Leaves come in three kinds: the (single) input, named parameters, and
//! constants. Constants never receive gradient, and nodes that depend only
//! on constants are skipped during backward.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::blur;
use crate::error::{Error, Result};
use crate::tensor::{self, check_conv_config, PadMap, PaddingMode, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Name of a differentiable parameter, e.g. `layer3.weight`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub String);

impl ParamId {
    pub fn new(name: impl Into<String>) -> Self {
        ParamId(name.into())
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ParamId {
    fn from(s: &str) -> Self {
        ParamId(s.to_string())
    }
}

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Which axes a reduction collapses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Axes {
    All,
    These(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub input_grad: Option<Tensor>,
    pub param_grads: BTreeMap<ParamId, Tensor>,
}

impl GradientBundle {
    pub fn param(&self, id: &ParamId) -> Option<&Tensor> {
        self.param_grads.get(id)
    }
}

#[derive(Debug)]
enum Leaf {
    Input,
    Param(ParamId),
    Constant,
}

#[derive(Debug)]
enum Op {
    Leaf(Leaf),
    Dense { x: usize, w: usize, b: usize },
    Conv2d { x: usize, k: usize, padding: PaddingMode },
    Depthwise { x: usize, k: usize, padding: PaddingMode },
    ChannelBias { x: usize, b: usize },
    Relu(usize),
    MaxPool2 { x: usize, arg: Vec<usize> },
    Reshape(usize),
    SoftmaxCe { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    ReduceMax { x: usize, arg: Vec<usize> },
    ReduceMean { x: usize, map: Vec<usize>, count: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Abs(usize),
    Clamp01(usize),
    Sum(usize),
    Scale(usize, f64),
    Gaussian { sigmas: usize, n: usize, normalized: bool },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::Relu(_) => "relu",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Reshape(_) => "reshape",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::ReduceMax { .. } => "reduce_max",
            Op::ReduceMean { .. } => "reduce_mean",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Abs(_) => "abs",
            Op::Clamp01(_) => "clamp01",
            Op::Sum(_) => "sum",
            Op::Scale(..) => "scale",
            Op::Gaussian { .. } => "gaussian_kernel",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    input: Option<usize>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            input: None,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let idx = self.check(v)?;
        Ok(&self.nodes[idx].value)
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Usage("variable belongs to a different tape".into()));
        }
        if self.consumed {
            return Err(Error::Usage("tape already consumed by a backward pass".into()));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::Usage("tape already consumed by a backward pass".into()));
        }
        if !value.all_finite() {
            return Err(Error::Domain(format!("{} produced a non-finite value", op.name())));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    fn val(&self, idx: usize) -> &Tensor {
        &self.nodes[idx].value
    }

    /// Records the differentiated input. A tape holds at most one.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        if self.input.is_some() {
            return Err(Error::Usage("tape already has an input leaf".into()));
        }
        let v = self.push(value, Op::Leaf(Leaf::Input), true)?;
        self.input = Some(v.idx);
        Ok(v)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf(Leaf::Param(id)), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf(Leaf::Constant), false)
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (x, w, b) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let out = tensor::dense(self.val(x), self.val(w), self.val(b))?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Dense { x, w, b }, ng)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, padding: PaddingMode) -> Result<Var> {
        let (x, k) = (self.check(x)?, self.check(k)?);
        let out = tensor::conv2d(self.val(x), self.val(k), padding)?;
        let ng = self.needs(x) || self.needs(k);
        self.push(out, Op::Conv2d { x, k, padding }, ng)
    }

    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, padding: PaddingMode) -> Result<Var> {
        let (x, k) = (self.check(x)?, self.check(k)?);
        let out = tensor::depthwise_conv2d(self.val(x), self.val(k), padding)?;
        let ng = self.needs(x) || self.needs(k);
        self.push(out, Op::Depthwise { x, k, padding }, ng)
    }

    /// Adds `b[c]` to every element of channel `c` of a `[C, H, W]` tensor.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (x, b) = (self.check(x)?, self.check(b)?);
        let (xv, bv) = (self.val(x), self.val(b));
        if xv.rank() != 3 || bv.shape() != [xv.shape()[0]] {
            return Err(Error::dim("channel_bias", xv.shape(), bv.shape()));
        }
        let plane = xv.shape()[1] * xv.shape()[2];
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i / plane];
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(out, Op::ChannelBias { x, b }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let out = self.val(x).map(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// 2×2 max pooling with stride 2 over `[C, H, W]` (odd trailing rows and
    /// columns are dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let xv = self.val(x);
        if xv.rank() != 3 || xv.shape()[1] < 2 || xv.shape()[2] < 2 {
            return Err(Error::dim("max_pool2", xv.shape(), &[2, 2]));
        }
        let (c_n, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(c_n * oh * ow);
        let mut arg = Vec::with_capacity(c_n * oh * ow);
        for c in 0..c_n {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = usize::MAX;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = (c * h + 2 * i + di) * w + 2 * j + dj;
                        if best == usize::MAX || xv.data()[idx] > xv.data()[best] {
                            best = idx;
                        }
                    }
                    out.push(xv.data()[best]);
                    arg.push(best);
                }
            }
        }
        let out = Tensor::new(vec![c_n, oh, ow], out)?;
        let ng = self.needs(x);
        self.push(out, Op::MaxPool2 { x, arg }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let x = self.check(x)?;
        let out = self.val(x).reshape(shape)?;
        let ng = self.needs(x);
        self.push(out, Op::Reshape(x), ng)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.check(logits)?;
        let lv = self.val(l);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::dim("softmax_cross_entropy", lv.shape(), &[labels.len()]));
        }
        let (batch, k) = (lv.shape()[0], lv.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(batch * k);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &lv.data()[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[y];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let out = Tensor::scalar(total / batch as f64);
        let ng = self.needs(l);
        self.push(
            out,
            Op::SoftmaxCe {
                logits: l,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Maximum over `axes`; ties resolve to the first element in row-major
    /// order, which is also where the gradient goes.
    pub fn reduce_max(&mut self, x: Var, axes: &Axes) -> Result<Var> {
        let x = self.check(x)?;
        let xv = self.val(x);
        let (out_shape, map) = reduction_map(xv.shape(), axes)?;
        let n_out: usize = out_shape.iter().product();
        let mut arg = vec![usize::MAX; n_out];
        for (i, &o) in map.iter().enumerate() {
            if arg[o] == usize::MAX || xv.data()[i] > xv.data()[arg[o]] {
                arg[o] = i;
            }
        }
        let out = Tensor::new(out_shape, arg.iter().map(|&i| xv.data()[i]).collect())?;
        let ng = self.needs(x);
        self.push(out, Op::ReduceMax { x, arg }, ng)
    }

    pub fn reduce_mean(&mut self, x: Var, axes: &Axes) -> Result<Var> {
        let x = self.check(x)?;
        let xv = self.val(x);
        let (out_shape, map) = reduction_map(xv.shape(), axes)?;
        let n_out: usize = out_shape.iter().product();
        let count = xv.numel() / n_out;
        let mut acc = vec![0.0; n_out];
        for (i, &o) in map.iter().enumerate() {
            acc[o] += xv.data()[i];
        }
        acc.iter_mut().for_each(|v| *v /= count as f64);
        let out = Tensor::new(out_shape, acc)?;
        let ng = self.needs(x);
        self.push(out, Op::ReduceMean { x, map, count }, ng)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((a, b, Tensor::new(av.shape().to_vec(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, out) = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, out) = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, out) = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let out = self.val(x).map(f64::abs);
        let ng = self.needs(x);
        self.push(out, Op::Abs(x), ng)
    }

    /// Elementwise `min(max(x, 0), 1)`; gradient passes where `0 <= x <= 1`.
    pub fn clamp01(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let out = self.val(x).map(|v| v.clamp(0.0, 1.0));
        let ng = self.needs(x);
        self.push(out, Op::Clamp01(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let out = Tensor::scalar(self.val(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let x = self.check(x)?;
        let out = self.val(x).map(|v| v * factor);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, factor), ng)
    }

    /// Builds `[C, N, N]` Gaussian weights from a `[C, 2]` tensor of
    /// per-channel `(σ₁, σ₂)`.
    pub fn gaussian_kernel(&mut self, sigmas: Var, n: usize, normalized: bool) -> Result<Var> {
        let s = self.check(sigmas)?;
        let sv = self.val(s);
        if sv.rank() != 2 || sv.shape()[1] != 2 {
            return Err(Error::dim("gaussian_kernel", sv.shape(), &[0, 2]));
        }
        check_conv_config(n, n, n, PaddingMode::Zero)?;
        let mut data = Vec::with_capacity(sv.shape()[0] * n * n);
        for pair in sv.data().chunks(2) {
            data.extend(blur::channel_weights(n, pair[0], pair[1], normalized)?);
        }
        let out = Tensor::new(vec![sv.shape()[0], n, n], data)?;
        let ng = self.needs(s);
        self.push(out, Op::Gaussian { sigmas: s, n, normalized }, ng)
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var, wanted: &[ParamId], want_input: bool) -> Result<GradientBundle> {
        let root = self.check(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        if want_input && self.input.is_none() {
            return Err(Error::Usage("input gradient requested but tape has no input".into()));
        }
        for id in wanted {
            let present = self
                .nodes
                .iter()
                .any(|n| matches!(&n.op, Op::Leaf(Leaf::Param(p)) if p == id));
            if !present {
                return Err(Error::Usage(format!("parameter '{id}' is not recorded on this tape")));
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![1.0]);
        for idx in (0..=root).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            if let Op::Leaf(_) = self.nodes[idx].op {
                grads[idx] = Some(dy);
                continue;
            }
            self.backprop_node(idx, &dy, &mut grads);
        }

        let mut bundle = GradientBundle {
            input_grad: None,
            param_grads: BTreeMap::new(),
        };
        if want_input {
            let i = self.input.expect("checked above");
            let shape = self.nodes[i].value.shape().to_vec();
            let g = grads[i].take().unwrap_or_else(|| vec![0.0; self.nodes[i].value.numel()]);
            bundle.input_grad = Some(Tensor::new(shape, g)?);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(Leaf::Param(id)) = &node.op {
                if !wanted.contains(id) {
                    continue;
                }
                let g = grads[idx].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                let g = Tensor::new(node.value.shape().to_vec(), g)?;
                match bundle.param_grads.get_mut(id) {
                    Some(existing) => {
                        for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        bundle.param_grads.insert(id.clone(), g);
                    }
                }
            }
        }
        self.consumed = true;
        self.nodes.clear();
        Ok(bundle)
    }

    fn backprop_node(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf(_) => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (batch, inputs) = (xv.shape()[0], xv.shape()[1]);
                let outputs = wv.shape()[1];
                if self.needs(*x) {
                    let mut dx = vec![0.0; batch * inputs];
                    for r in 0..batch {
                        let dyr = &dy[r * outputs..(r + 1) * outputs];
                        for k in 0..inputs {
                            let wr = &wv.data()[k * outputs..(k + 1) * outputs];
                            dx[r * inputs + k] = wr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; inputs * outputs];
                    for r in 0..batch {
                        let dyr = &dy[r * outputs..(r + 1) * outputs];
                        for k in 0..inputs {
                            let xv_rk = xv.data()[r * inputs + k];
                            if xv_rk == 0.0 {
                                continue;
                            }
                            for (d, g) in dw[k * outputs..(k + 1) * outputs].iter_mut().zip(dyr) {
                                *d += xv_rk * g;
                            }
                        }
                    }
                    accumulate(grads, *w, dw);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; outputs];
                    for r in 0..batch {
                        for (d, g) in db.iter_mut().zip(&dy[r * outputs..(r + 1) * outputs]) {
                            *d += g;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, k, padding } => {
                let (xv, kv) = (self.val(*x), self.val(*k));
                let (cin, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let n = kv.shape()[2];
                let (hw, q) = (h * w, cin * n * n);
                let map = PadMap::new(h, w, n, *padding);
                if self.needs(*k) {
                    let cols = tensor::conv_columns(xv, &map, n);
                    let mut dk = vec![0.0; kv.numel()];
                    for (o, g) in dy.chunks_exact(hw).enumerate() {
                        for (d, col) in dk[o * q..(o + 1) * q].iter_mut().zip(cols.chunks_exact(hw)) {
                            *d = tensor::dot(g, col);
                        }
                    }
                    accumulate(grads, *k, dk);
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; q * hw];
                    for (o, g) in dy.chunks_exact(hw).enumerate() {
                        for (kval, dcol) in kv.data()[o * q..(o + 1) * q].iter().zip(dcols.chunks_exact_mut(hw)) {
                            if *kval != 0.0 {
                                tensor::axpy(dcol, *kval, g);
                            }
                        }
                    }
                    let mut dx = vec![0.0; xv.numel()];
                    let per = n * n * hw;
                    for c in 0..cin {
                        let mut dp = vec![0.0; map.padded_len()];
                        map.col2im_add(&dcols[c * per..(c + 1) * per], n, &mut dp);
                        map.unpad_add(&dp, &mut dx[c * hw..(c + 1) * hw]);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Depthwise { x, k, padding } => {
                let (xv, kv) = (self.val(*x), self.val(*k));
                let (h, w) = (xv.shape()[1], xv.shape()[2]);
                let n = kv.shape()[1];
                let (hw, taps) = (h * w, n * n);
                let map = PadMap::new(h, w, n, *padding);
                if self.needs(*k) {
                    let cols = tensor::conv_columns(xv, &map, n);
                    let mut dk = vec![0.0; kv.numel()];
                    for (c, g) in dy.chunks_exact(hw).enumerate() {
                        let ccols = &cols[c * taps * hw..(c + 1) * taps * hw];
                        for (d, col) in dk[c * taps..(c + 1) * taps].iter_mut().zip(ccols.chunks_exact(hw)) {
                            *d = tensor::dot(g, col);
                        }
                    }
                    accumulate(grads, *k, dk);
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; xv.numel()];
                    for (c, g) in dy.chunks_exact(hw).enumerate() {
                        let mut dcols = vec![0.0; taps * hw];
                        for (kval, dcol) in kv.data()[c * taps..(c + 1) * taps].iter().zip(dcols.chunks_exact_mut(hw)) {
                            tensor::axpy(dcol, *kval, g);
                        }
                        let mut dp = vec![0.0; map.padded_len()];
                        map.col2im_add(&dcols, n, &mut dp);
                        map.unpad_add(&dp, &mut dx[c * hw..(c + 1) * hw]);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::ChannelBias { x, b } => {
                if self.needs(*x) {
                    accumulate(grads, *x, dy.to_vec());
                }
                if self.needs(*b) {
                    let xv = self.val(*x);
                    let plane = xv.shape()[1] * xv.shape()[2];
                    let db = dy.chunks(plane).map(|ch| ch.iter().sum()).collect();
                    accumulate(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                let xv = self.val(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::MaxPool2 { x, arg } => {
                let mut dx = vec![0.0; self.val(*x).numel()];
                for (&i, &g) in arg.iter().zip(dy) {
                    dx[i] += g;
                }
                accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => accumulate(grads, *x, dy.to_vec()),
            Op::SoftmaxCe { logits, labels, probs } => {
                let batch = labels.len();
                let k = probs.len() / batch;
                let scale = dy[0] / batch as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    dl[r * k + y] -= scale;
                }
                accumulate(grads, *logits, dl);
            }
            Op::ReduceMax { x, arg } => {
                let mut dx = vec![0.0; self.val(*x).numel()];
                for (&i, &g) in arg.iter().zip(dy) {
                    dx[i] += g;
                }
                accumulate(grads, *x, dx);
            }
            Op::ReduceMean { x, map, count } => {
                let inv = 1.0 / *count as f64;
                let dx = map.iter().map(|&o| dy[o] * inv).collect();
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, dy.to_vec());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, dy.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, dy.to_vec());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, dy.iter().map(|g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.needs(*a) {
                    accumulate(grads, *a, dy.iter().zip(bv.data()).map(|(g, v)| g * v).collect());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, dy.iter().zip(av.data()).map(|(g, v)| g * v).collect());
                }
            }
            Op::Abs(x) => {
                let dx = self
                    .val(*x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| {
                        if v > 0.0 {
                            g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Clamp01(x) => {
                let dx = self
                    .val(*x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if (0.0..=1.0).contains(&v) { g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                accumulate(grads, *x, vec![dy[0]; self.val(*x).numel()]);
            }
            Op::Scale(x, f) => {
                accumulate(grads, *x, dy.iter().map(|g| g * f).collect());
            }
            Op::Gaussian { sigmas, n, normalized } => {
                let sv = self.val(*sigmas);
                let n2 = n * n;
                let mut ds = Vec::with_capacity(sv.numel());
                for (c, pair) in sv.data().chunks(2).enumerate() {
                    let upstream = &dy[c * n2..(c + 1) * n2];
                    let (g1, g2) = blur::channel_sigma_vjp(*n, pair[0], pair[1], *normalized, upstream);
                    ds.push(g1);
                    ds.push(g2);
                }
                accumulate(grads, *sigmas, ds);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, contrib: Vec<f64>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// Output shape of a reduction and, for each input element in row-major
/// order, the flat output index it folds into.
fn reduction_map(shape: &[usize], axes: &Axes) -> Result<(Vec<usize>, Vec<usize>)> {
    let reduced: Vec<bool> = match axes {
        Axes::All => vec![true; shape.len()],
        Axes::These(list) => {
            if list.is_empty() {
                return Err(Error::Config("reduction over an empty axis set".into()));
            }
            let mut mask = vec![false; shape.len()];
            for &a in list {
                if a >= shape.len() {
                    return Err(Error::Config(format!(
                        "axis {a} out of range for rank {}",
                        shape.len()
                    )));
                }
                mask[a] = true;
            }
            mask
        }
    };
    let mut out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut index = vec![0usize; shape.len()];
    for _ in 0..total {
        let mut o = 0;
        for (d, (&i, &r)) in index.iter().zip(&reduced).enumerate() {
            if !r {
                o = o * shape[d] + i;
            }
        }
        map.push(o);
        for d in (0..shape.len()).rev() {
            index[d] += 1;
            if index[d] < shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    Ok((out_shape, map))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_identity_and_hand_sum() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[1.0, 2.0]);

        let x = tape.constant(t(&[1, 2], &[1.0, 1.0])).unwrap();
        let w = tape.constant(t(&[2, 1], &[2.0, 3.0])).unwrap();
        let b = tape.constant(t(&[1], &[1.0])).unwrap();
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[6.0]);
    }

    #[test]
    fn dense_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
        let w = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        let err = tape.dense(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.0, 0.0, 2.0]);
        let x = tape.constant(t(&[2], &[-3.0, -0.5])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 5])).unwrap();
        let l = tape.softmax_cross_entropy(z, &[3]).unwrap();
        assert!((tape.value(l).unwrap().item().unwrap() - 5f64.ln()).abs() < 1e-12);

        let z = tape.constant(t(&[1, 2], &[1000.0, 0.0])).unwrap();
        let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
        assert!(tape.value(l).unwrap().item().unwrap().abs() < 1e-12);

        let z = tape.constant(Tensor::zeros(&[1, 2])).unwrap();
        assert!(matches!(tape.softmax_cross_entropy(z, &[2]), Err(Error::Index(_))));
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 2], &[1.0, 5.0, 2.0, 2.0])).unwrap();
        let m = tape.reduce_max(x, &Axes::All).unwrap();
        let a = tape.reduce_mean(x, &Axes::All).unwrap();
        assert_eq!(tape.value(m).unwrap().data(), &[5.0]);
        assert_eq!(tape.value(a).unwrap().data(), &[2.5]);
        let rows = tape.reduce_max(x, &Axes::These(vec![1])).unwrap();
        assert_eq!(tape.value(rows).unwrap().data(), &[5.0, 2.0]);
        assert!(tape.reduce_max(x, &Axes::These(vec![])).is_err());
        assert!(tape.reduce_max(x, &Axes::These(vec![2])).is_err());
    }

    #[test]
    fn max_tie_goes_to_first_element() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::filled(&[2, 3], 4.0)).unwrap();
            let m = tape.reduce_max(x, &Axes::All).unwrap();
            assert_eq!(tape.value(m).unwrap().data(), &[4.0]);
            tape.backward(m, &[], true).unwrap().input_grad.unwrap()
        };
        let g = run();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let again = run();
        assert_eq!(
            g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn sum_and_zero_scaled_losses() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3], &[0.3, -2.0, 7.0])).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s, &[], true).unwrap();
        assert_eq!(g.input_grad.unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.input(t(&[3], &[0.3, -2.0, 7.0])).unwrap();
        let w = tape.param("w".into(), t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let p = tape.mul(x, w).unwrap();
        let s = tape.sum(p).unwrap();
        let z = tape.scale(s, 0.0).unwrap();
        let g = tape.backward(z, &["w".into()], true).unwrap();
        assert!(g.input_grad.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.param(&"w".into()).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_usage_errors() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[1.0, 2.0])).unwrap();
        let s = tape.sum(x).unwrap();
        assert!(matches!(tape.backward(x, &[], true), Err(Error::Usage(_))));
        assert!(matches!(tape.backward(s, &["nope".into()], true), Err(Error::Usage(_))));

        let mut other = Tape::new();
        assert!(matches!(other.backward(s, &[], false), Err(Error::Usage(_))));

        tape.backward(s, &[], true).unwrap();
        assert!(matches!(tape.backward(s, &[], true), Err(Error::Usage(_))));
        assert!(tape.is_consumed());
    }

    #[test]
    fn requested_parameter_appears_once() {
        let mut tape = Tape::new();
        let a = tape.param("w".into(), t(&[2], &[1.0, 2.0])).unwrap();
        let b = tape.param("v".into(), t(&[2], &[3.0, 4.0])).unwrap();
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s, &["w".into(), "v".into()], false).unwrap();
        assert_eq!(g.param_grads.len(), 2);
        assert_eq!(g.param(&"w".into()).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(g.param(&"v".into()).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn operands_are_not_mutated() {
        let x0 = t(&[1, 3, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
        let k0 = Tensor::filled(&[2, 1, 3, 3], 0.25);
        let mut tape = Tape::new();
        let x = tape.input(x0.clone()).unwrap();
        let k = tape.param("k".into(), k0.clone()).unwrap();
        let y = tape.conv2d(x, k, PaddingMode::Reflect).unwrap();
        let r = tape.relu(y).unwrap();
        assert_eq!(tape.value(x).unwrap(), &x0);
        assert_eq!(tape.value(k).unwrap(), &k0);
        let s = tape.sum(r).unwrap();
        tape.backward(s, &["k".into()], true).unwrap();
    }
}
