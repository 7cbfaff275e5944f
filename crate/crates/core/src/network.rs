//! Layer-stack classifiers: the two-spirals MLP and the toy image CNN,
//! plus the versioned binary model format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::{PaddingMode, Tensor};

pub const MODEL_MAGIC: &[u8; 8] = b"BLURNET\0";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Same-size convolution followed by a per-channel bias.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: PaddingMode,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    MaxPool2,
    /// Reshape to `[1, numel]`.
    Flatten,
}

impl LayerSpec {
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]],
            LayerSpec::Dense { inputs, outputs } => vec![vec![inputs, outputs], vec![outputs]],
            _ => Vec::new(),
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                if input.len() != 3 || input[0] != in_channels || kernel % 2 == 0 {
                    return Err(Error::dim("conv layer", input, &[in_channels, kernel, kernel]));
                }
                Ok(vec![out_channels, input[1], input[2]])
            }
            LayerSpec::Dense { inputs, outputs } => {
                if input != [1, inputs] {
                    return Err(Error::dim("dense layer", input, &[1, inputs]));
                }
                Ok(vec![1, outputs])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2 => {
                if input.len() != 3 || input[1] < 2 || input[2] < 2 {
                    return Err(Error::dim("max_pool2 layer", input, &[2, 2]));
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            LayerSpec::Flatten => Ok(vec![1, input.iter().product()]),
        }
    }
}

/// Output of one recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub logits: Var,
    pub features: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Vec<Tensor>>,
    feature_tap: usize,
    classes: usize,
}

impl Network {
    /// Builds a network with He-normal weights and zero biases drawn from
    /// a ChaCha8 stream seeded by `seed`.
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>, feature_tap: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layers
            .iter()
            .map(|layer| {
                layer
                    .param_shapes()
                    .into_iter()
                    .enumerate()
                    .map(|(i, shape)| {
                        if i == 1 {
                            return Tensor::zeros(&shape);
                        }
                        let fan_in: usize = match layer {
                            LayerSpec::Dense { inputs, .. } => *inputs,
                            _ => shape[1..].iter().product(),
                        };
                        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                        Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
                    })
                    .collect()
            })
            .collect();
        Self::from_parts(input_shape, layers, params, feature_tap)
    }

    pub fn from_parts(
        input_shape: &[usize],
        layers: Vec<LayerSpec>,
        params: Vec<Vec<Tensor>>,
        feature_tap: usize,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        if params.len() != layers.len() {
            return Err(Error::Config("parameter table does not match layer count".into()));
        }
        if feature_tap >= layers.len() {
            return Err(Error::Config(format!(
                "feature tap {feature_tap} beyond last layer {}",
                layers.len() - 1
            )));
        }
        let mut shape = input_shape.to_vec();
        for (layer, ps) in layers.iter().zip(&params) {
            let expected = layer.param_shapes();
            if ps.len() != expected.len() || ps.iter().zip(&expected).any(|(p, e)| p.shape() != e.as_slice()) {
                return Err(Error::Config(format!("parameter shapes do not match layer {layer:?}")));
            }
            shape = layer.output_shape(&shape)?;
        }
        if shape.len() != 2 || shape[0] != 1 {
            return Err(Error::Config(format!("network must end in [1, classes], got {shape:?}")));
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            params,
            feature_tap,
            classes: shape[1],
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_tap(&self) -> usize {
        self.feature_tap
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(Tensor::numel).sum()
    }

    fn param_name(layer: usize, slot: usize) -> ParamId {
        ParamId(format!("layer{layer}.{}", if slot == 0 { "weight" } else { "bias" }))
    }

    /// All parameters in layer order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        self.params
            .iter()
            .enumerate()
            .flat_map(|(l, ps)| ps.iter().enumerate().map(move |(s, t)| (Self::param_name(l, s), t)))
            .collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.params().into_iter().map(|(id, _)| id).collect()
    }

    pub fn param_mut(&mut self, id: &ParamId) -> Option<&mut Tensor> {
        for (l, ps) in self.params.iter_mut().enumerate() {
            for (s, t) in ps.iter_mut().enumerate() {
                if &Self::param_name(l, s) == id {
                    return Some(t);
                }
            }
        }
        None
    }

    /// Records a forward pass. Parameters become named leaves when
    /// `track_params` is set and constants otherwise.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var, track_params: bool) -> Result<Forward> {
        self.forward_on_tape_at(tape, x, track_params, self.feature_tap)
    }

    /// Like [`Network::forward_on_tape`] with the feature block taken from
    /// the output of layer `tap`.
    pub fn forward_on_tape_at(&self, tape: &mut Tape, x: Var, track_params: bool, tap: usize) -> Result<Forward> {
        if tap >= self.layers.len() {
            return Err(Error::Config(format!("feature layer {tap} does not exist")));
        }
        let shape = tape.value(x)?.shape();
        if shape != self.input_shape.as_slice() {
            return Err(Error::dim("network input", shape, &self.input_shape));
        }
        let mut h = x;
        let mut features = x;
        for (l, (layer, ps)) in self.layers.iter().zip(&self.params).enumerate() {
            let leaf = |tape: &mut Tape, s: usize| -> Result<Var> {
                if track_params {
                    tape.param(Self::param_name(l, s), ps[s].clone())
                } else {
                    tape.constant(ps[s].clone())
                }
            };
            h = match *layer {
                LayerSpec::Conv2d { padding, .. } => {
                    let (w, b) = (leaf(tape, 0)?, leaf(tape, 1)?);
                    let y = tape.conv2d(h, w, padding)?;
                    tape.channel_bias(y, b)?
                }
                LayerSpec::Dense { .. } => {
                    let (w, b) = (leaf(tape, 0)?, leaf(tape, 1)?);
                    tape.dense(h, w, b)?
                }
                LayerSpec::Relu => tape.relu(h)?,
                LayerSpec::MaxPool2 => tape.max_pool2(h)?,
                LayerSpec::Flatten => {
                    let n = tape.value(h)?.numel();
                    tape.reshape(h, &[1, n])?
                }
            };
            if l == tap {
                features = h;
            }
        }
        Ok(Forward { logits: h, features })
    }

    /// Logits `[1, classes]` and the feature block, without gradients.
    pub fn run(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let input = tape.constant(x.clone())?;
        let fwd = self.forward_on_tape(&mut tape, input, false)?;
        Ok((tape.value(fwd.logits)?.clone(), tape.value(fwd.features)?.clone()))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x)?.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.input_shape.len() as u32).to_le_bytes());
        for &d in &self.input_shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                } => {
                    out.push(0);
                    for v in [in_channels, out_channels, kernel] {
                        out.extend_from_slice(&(v as u64).to_le_bytes());
                    }
                    out.push(match padding {
                        PaddingMode::Zero => 0,
                        PaddingMode::Reflect => 1,
                        PaddingMode::Circular => 2,
                    });
                }
                LayerSpec::Dense { inputs, outputs } => {
                    out.push(1);
                    out.extend_from_slice(&(inputs as u64).to_le_bytes());
                    out.extend_from_slice(&(outputs as u64).to_le_bytes());
                }
                LayerSpec::Relu => out.push(2),
                LayerSpec::MaxPool2 => out.push(3),
                LayerSpec::Flatten => out.push(4),
            }
        }
        out.extend_from_slice(&(self.feature_tap as u64).to_le_bytes());
        for t in self.params.iter().flatten() {
            out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MODEL_MAGIC {
            return Err(Error::Format("not a model file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model format version {version}")));
        }
        let rank = r.u32()? as usize;
        let input_shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let layer = match r.take(1)?[0] {
                0 => {
                    let (in_channels, out_channels, kernel) = (r.usize()?, r.usize()?, r.usize()?);
                    let padding = match r.take(1)?[0] {
                        0 => PaddingMode::Zero,
                        1 => PaddingMode::Reflect,
                        2 => PaddingMode::Circular,
                        p => return Err(Error::Format(format!("unknown padding tag {p}"))),
                    };
                    LayerSpec::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        padding,
                    }
                }
                1 => LayerSpec::Dense {
                    inputs: r.usize()?,
                    outputs: r.usize()?,
                },
                2 => LayerSpec::Relu,
                3 => LayerSpec::MaxPool2,
                4 => LayerSpec::Flatten,
                t => return Err(Error::Format(format!("unknown layer tag {t}"))),
            };
            layers.push(layer);
        }
        let feature_tap = r.usize()?;
        let mut params = Vec::with_capacity(layers.len());
        for layer in &layers {
            let mut ps = Vec::new();
            for shape in layer.param_shapes() {
                let n = r.usize()?;
                if n != shape.iter().product::<usize>() {
                    return Err(Error::Format("parameter blob size mismatch".into()));
                }
                let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                ps.push(Tensor::new(shape, data)?);
            }
            params.push(ps);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        Self::from_parts(&input_shape, layers, params, feature_tap)
    }

    /// Writes the model atomically: a sibling temp file renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("invalid output path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("truncated model file".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format("size field overflows".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Fully connected ReLU network over a flattened input. `widths` lists
/// every layer width from input to classes, so `widths.len() - 1` dense
/// layers are built. The feature tap is the last hidden activation.
pub fn build_mlp(widths: &[usize], seed: u64) -> Result<Network> {
    if widths.len() < 3 {
        return Err(Error::Config("an MLP needs at least one hidden layer".into()));
    }
    let mut layers = vec![LayerSpec::Flatten];
    for pair in widths.windows(2) {
        layers.push(LayerSpec::Dense {
            inputs: pair[0],
            outputs: pair[1],
        });
        layers.push(LayerSpec::Relu);
    }
    layers.pop();
    let tap = layers.len() - 2;
    Network::new(&[widths[0]], layers, tap, seed)
}

/// The five-layer spirals classifier: 2 → 32 → 32 → 32 → 32 → 2.
pub fn build_spirals_mlp(seed: u64) -> Result<Network> {
    build_mlp(&[2, 32, 32, 32, 32, 2], seed)
}

/// Three conv blocks (3×3 conv, bias, ReLU; the first two max-pooled) and
/// a dense classifier. The feature tap is the third block's activation.
pub fn build_toy_cnn(input: [usize; 3], channels: [usize; 3], classes: usize, seed: u64) -> Result<Network> {
    let conv = |i, o| LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        padding: PaddingMode::Zero,
    };
    let (h, w) = (input[1] / 4, input[2] / 4);
    let layers = vec![
        conv(input[0], channels[0]),
        LayerSpec::Relu,
        LayerSpec::MaxPool2,
        conv(channels[0], channels[1]),
        LayerSpec::Relu,
        LayerSpec::MaxPool2,
        conv(channels[1], channels[2]),
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Dense {
            inputs: channels[2] * h * w,
            outputs: classes,
        },
    ];
    Network::new(&input, layers, 7, seed)
}

/// Default image classifier: `[3, 16, 16]` input, 5 classes.
pub fn build_default_cnn(seed: u64) -> Result<Network> {
    build_toy_cnn([3, 16, 16], [8, 12, 12], 5, seed)
}

/// Argmax class (lowest index on ties) and softmax probabilities.
pub fn evaluate(net: &Network, x: &Tensor) -> Result<(usize, Vec<f64>)> {
    let logits = net.logits(x)?;
    Ok(softmax_argmax(logits.data()))
}

pub fn softmax_argmax(logits: &[f64]) -> (usize, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    (best, probs)
}
