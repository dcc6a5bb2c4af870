//! The hybrid architecture: VGG-style convolution blocks, a flatten stage, an
//! LSTM over the flattened feature map, and a two-layer dense head with softmax.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use crate::error::{Error, Result};
use crate::layers::{
    flatten, flatten_backward, relu, relu_backward, softmax, softmax_backward, Conv2d,
    Conv2dCache, Dense, DenseCache, FlattenCache, MaxPool2d, MaxPoolCache, Padding, ReluCache,
};
use crate::recurrent::{Lstm, LstmCache};
use crate::tensor::{Element, Init, Rng, Tensor};

/// How the flattened feature map is presented to the LSTM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceMode {
    /// One timestep per spatial position (row-major), channels as features.
    /// For a `(512, 7, 7)` map this is 49 steps of 512 features.
    Spatial,
    /// The whole flattened vector as a single timestep.
    SingleStep,
}

impl fmt::Display for SequenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SequenceMode::Spatial => "spatial49",
            SequenceMode::SingleStep => "single_step",
        })
    }
}

impl FromStr for SequenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial49" | "spatial" => Ok(SequenceMode::Spatial),
            "single_step" => Ok(SequenceMode::SingleStep),
            other => Err(Error::Config(format!("unknown sequence mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `(channels, height, width)`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Convolutions per block; each block ends in a 2x2/2 max pool.
    pub block_convs: Vec<usize>,
    /// Output channels of every convolution in the block.
    pub block_channels: Vec<usize>,
    pub kernel_size: usize,
    pub lstm_hidden: usize,
    pub head_hidden: usize,
    pub sequence_mode: SequenceMode,
}

impl ModelConfig {
    /// Full-size network: 224x224x3 input, VGG16 channel plan, LSTM of 128.
    pub fn paper() -> Self {
        Self {
            input_shape: [3, 224, 224],
            num_classes: 4,
            block_convs: vec![2, 2, 3, 3, 3],
            block_channels: vec![64, 128, 256, 512, 512],
            kernel_size: 3,
            lstm_hidden: 128,
            head_hidden: 128,
            sequence_mode: SequenceMode::Spatial,
        }
    }

    /// Same layer census at 32x32 with narrow channels, for tests and desk runs.
    pub fn toy() -> Self {
        Self {
            input_shape: [3, 32, 32],
            num_classes: 4,
            block_convs: vec![2, 2, 3, 3, 3],
            block_channels: vec![4, 8, 8, 16, 16],
            kernel_size: 3,
            lstm_hidden: 16,
            head_hidden: 16,
            sequence_mode: SequenceMode::Spatial,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("input shape {:?} has a zero axis", self.input_shape)));
        }
        if self.block_convs.is_empty() || self.block_convs.len() != self.block_channels.len() {
            return Err(Error::Config(format!(
                "block plan mismatch: {} conv counts vs {} channel widths",
                self.block_convs.len(),
                self.block_channels.len()
            )));
        }
        if self.block_convs.iter().chain(&self.block_channels).any(|&v| v == 0) {
            return Err(Error::Config("block plan entries must be positive".into()));
        }
        let factor = 1usize << self.block_convs.len();
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by 2^{} = {factor}",
                self.block_convs.len()
            )));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.lstm_hidden == 0 || self.head_hidden == 0 {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        Ok(())
    }

    /// Shape of the last pooled feature map, `(channels, h, w)`.
    pub fn feature_map(&self) -> [usize; 3] {
        let factor = 1usize << self.block_convs.len();
        [
            *self.block_channels.last().unwrap_or(&0),
            self.input_shape[1] / factor,
            self.input_shape[2] / factor,
        ]
    }

    /// `(timesteps, features)` seen by the LSTM.
    pub fn sequence_shape(&self) -> (usize, usize) {
        let [c, h, w] = self.feature_map();
        match self.sequence_mode {
            SequenceMode::Spatial => (h * w, c),
            SequenceMode::SingleStep => (1, c * h * w),
        }
    }

    /// Layer-by-layer description with per-sample output shapes, without
    /// allocating any parameters.
    pub fn plan(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let k = self.kernel_size;
        let [mut ch, mut h, mut w] = self.input_shape;
        let mut specs = Vec::new();
        for (b, (&convs, &width)) in self.block_convs.iter().zip(&self.block_channels).enumerate() {
            for j in 0..convs {
                specs.push(LayerSpec {
                    name: format!("block{}_conv{}", b + 1, j + 1),
                    kind: LayerKind::Conv {
                        in_channels: ch,
                        out_channels: width,
                        kernel: k,
                    },
                    output_shape: vec![width, h, w],
                });
                ch = width;
                specs.push(LayerSpec {
                    name: format!("block{}_relu{}", b + 1, j + 1),
                    kind: LayerKind::Relu,
                    output_shape: vec![ch, h, w],
                });
            }
            h /= 2;
            w /= 2;
            specs.push(LayerSpec {
                name: format!("block{}_pool", b + 1),
                kind: LayerKind::MaxPool,
                output_shape: vec![ch, h, w],
            });
        }
        specs.push(LayerSpec {
            name: "flatten".into(),
            kind: LayerKind::Flatten,
            output_shape: vec![ch * h * w],
        });
        let (steps, features) = self.sequence_shape();
        specs.push(LayerSpec {
            name: "sequence".into(),
            kind: LayerKind::Sequence {
                mode: self.sequence_mode,
                steps,
                features,
            },
            output_shape: vec![steps, features],
        });
        specs.push(LayerSpec {
            name: "lstm".into(),
            kind: LayerKind::Lstm {
                input: features,
                hidden: self.lstm_hidden,
            },
            output_shape: vec![self.lstm_hidden],
        });
        specs.push(LayerSpec {
            name: "fc1".into(),
            kind: LayerKind::Dense {
                input: self.lstm_hidden,
                output: self.head_hidden,
            },
            output_shape: vec![self.head_hidden],
        });
        specs.push(LayerSpec {
            name: "fc1_relu".into(),
            kind: LayerKind::Relu,
            output_shape: vec![self.head_hidden],
        });
        specs.push(LayerSpec {
            name: "fc2".into(),
            kind: LayerKind::Dense {
                input: self.head_hidden,
                output: self.num_classes,
            },
            output_shape: vec![self.num_classes],
        });
        specs.push(LayerSpec {
            name: "softmax".into(),
            kind: LayerKind::Softmax,
            output_shape: vec![self.num_classes],
        });
        Ok(specs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    MaxPool,
    Flatten,
    Sequence {
        mode: SequenceMode,
        steps: usize,
        features: usize,
    },
    Lstm {
        input: usize,
        hidden: usize,
    },
    Dense {
        input: usize,
        output: usize,
    },
    Softmax,
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Sequence { .. } => "sequence",
            LayerKind::Lstm { .. } => "lstm",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Softmax => "softmax",
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
            } => kernel * kernel * in_channels * out_channels + out_channels,
            LayerKind::Lstm { input, hidden } => 4 * ((input + hidden) * hidden + hidden),
            LayerKind::Dense { input, output } => input * output + output,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Per-sample output shape (no batch axis).
    pub output_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
enum Op<F: Element> {
    Conv(Conv2d<F>),
    Relu,
    MaxPool(MaxPool2d),
    Flatten,
    Sequence {
        mode: SequenceMode,
        positions: usize,
    },
    Lstm(Lstm<F>),
    Dense(Dense<F>),
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer<F: Element> {
    spec: LayerSpec,
    op: Op<F>,
}

#[derive(Debug, Clone)]
enum LayerCache<F: Element> {
    Conv(Conv2dCache<F>),
    Relu(ReluCache<F>),
    MaxPool(MaxPoolCache),
    Flatten(FlattenCache),
    Sequence,
    Lstm(LstmCache<F>),
    Dense(DenseCache<F>),
    Softmax(Tensor<F>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Result of [`ModelGraph::forward`]. Caches are kept only in train mode.
#[derive(Debug, Clone)]
pub struct Forward<F: Element = f32> {
    pub logits: Tensor<F>,
    pub probs: Tensor<F>,
    caches: Option<Vec<LayerCache<F>>>,
}

impl<F: Element> Forward<F> {
    pub fn has_caches(&self) -> bool {
        self.caches.is_some()
    }
}

/// Gradients aligned with [`ModelGraph::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<F: Element = f32> {
    pub tensors: Vec<Tensor<F>>,
    /// Gradient with respect to the input batch.
    pub input: Tensor<F>,
}

/// Instantiated network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<F: Element = f32> {
    config: ModelConfig,
    layers: Vec<Layer<F>>,
}

/// Builds the hybrid network with fresh random parameters.
pub fn build_hybrid<F: Element>(config: &ModelConfig, rng: &mut Rng) -> Result<ModelGraph<F>> {
    ModelGraph::assemble(config, Some(rng))
}

impl<F: Element> ModelGraph<F> {
    /// Same architecture as [`build_hybrid`] with every parameter zero.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Self::assemble(config, None)
    }

    fn assemble(config: &ModelConfig, mut rng: Option<&mut Rng>) -> Result<Self> {
        let specs = config.plan()?;
        let positions = {
            let [_, h, w] = config.feature_map();
            h * w
        };
        let feeds_softmax: Vec<bool> = (0..specs.len())
            .map(|i| specs.get(i + 1).is_some_and(|s| s.kind == LayerKind::Softmax))
            .collect();
        let mut layers = Vec::with_capacity(specs.len());
        for (spec, feeds_softmax) in specs.into_iter().zip(feeds_softmax) {
            let op = match spec.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                } => Op::Conv(match rng.as_deref_mut() {
                    Some(r) => Conv2d::new(in_channels, out_channels, kernel, Padding::Same, r)?,
                    None => Conv2d {
                        weights: Tensor::zeros([out_channels, in_channels, kernel, kernel]),
                        bias: Tensor::zeros([out_channels]),
                        stride: (1, 1),
                        padding: Padding::Same,
                    },
                }),
                LayerKind::Relu => Op::Relu,
                LayerKind::MaxPool => Op::MaxPool(MaxPool2d::default()),
                LayerKind::Flatten => Op::Flatten,
                LayerKind::Sequence { mode, .. } => Op::Sequence { mode, positions },
                LayerKind::Lstm { input, hidden } => Op::Lstm(match rng.as_deref_mut() {
                    Some(r) => Lstm::new(input, hidden, r)?,
                    None => Lstm::zeros(input, hidden),
                }),
                LayerKind::Dense { input, output } => {
                    // The layer feeding softmax gets Xavier, the rest feed ReLU and get He.
                    let scheme = if feeds_softmax {
                        Init::UniformXavier {
                            fan_in: input,
                            fan_out: output,
                        }
                    } else {
                        Init::UniformHe { fan_in: input }
                    };
                    Op::Dense(match rng.as_deref_mut() {
                        Some(r) => Dense::new(input, output, scheme, r)?,
                        None => Dense {
                            weights: Tensor::zeros([input, output]),
                            bias: Tensor::zeros([output]),
                        },
                    })
                }
                LayerKind::Softmax => Op::Softmax,
            };
            layers.push(Layer { spec, op });
        }
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layer_specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().map(|l| &l.spec)
    }

    /// Named parameter tensors in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            let name = &layer.spec.name;
            match &layer.op {
                Op::Conv(c) => {
                    out.push((format!("{name}.weight"), &c.weights));
                    out.push((format!("{name}.bias"), &c.bias));
                }
                Op::Dense(d) => {
                    out.push((format!("{name}.weight"), &d.weights));
                    out.push((format!("{name}.bias"), &d.bias));
                }
                Op::Lstm(l) => {
                    for (pname, t) in Lstm::<F>::TENSOR_NAMES.iter().zip(l.tensors()) {
                        out.push((format!("{name}.{pname}"), t));
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match &mut layer.op {
                Op::Conv(c) => {
                    out.push(&mut c.weights);
                    out.push(&mut c.bias);
                }
                Op::Dense(d) => {
                    out.push(&mut d.weights);
                    out.push(&mut d.bias);
                }
                Op::Lstm(l) => out.extend(l.tensors_mut()),
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_input(&self, batch: &Tensor<F>) -> Result<()> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.config.input_shape {
            let mut want = vec![0];
            want.extend_from_slice(&self.config.input_shape);
            return Err(Error::dim("model input", s, &want));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Tensor<F>, mode: Mode) -> Result<Forward<F>> {
        self.check_input(batch)?;
        let keep = mode == Mode::Train;
        let mut caches = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        let mut x = batch.clone();
        let mut logits = None;
        for layer in &self.layers {
            let (y, cache) = match &layer.op {
                Op::Conv(c) => {
                    let (y, cache) = c.forward(&x)?;
                    (y, LayerCache::Conv(cache))
                }
                Op::Relu => {
                    let (y, cache) = relu(&x);
                    (y, LayerCache::Relu(cache))
                }
                Op::MaxPool(p) => {
                    let (y, cache) = p.forward(&x)?;
                    (y, LayerCache::MaxPool(cache))
                }
                Op::Flatten => {
                    let (y, cache) = flatten(&x)?;
                    (y, LayerCache::Flatten(cache))
                }
                Op::Sequence { mode, positions } => {
                    (to_sequence(&x, *mode, *positions)?, LayerCache::Sequence)
                }
                Op::Lstm(l) => {
                    let (_, last, cache) = l.forward(&x, None)?;
                    (last.h, LayerCache::Lstm(cache))
                }
                Op::Dense(d) => {
                    let (y, cache) = d.forward(&x)?;
                    (y, LayerCache::Dense(cache))
                }
                Op::Softmax => {
                    let p = softmax(&x)?;
                    logits = Some(x.clone());
                    (p.clone(), LayerCache::Softmax(p))
                }
            };
            if keep {
                caches.push(cache);
            }
            x = y;
        }
        Ok(Forward {
            logits: logits.ok_or_else(|| Error::State("model has no softmax layer".into()))?,
            probs: x,
            caches: keep.then_some(caches),
        })
    }

    /// Backpropagates a gradient on the output probabilities.
    pub fn backward(&self, fwd: &Forward<F>, grad_probs: &Tensor<F>) -> Result<ParamGrads<F>> {
        self.backward_inner(fwd, grad_probs, true)
    }

    /// Backpropagates a gradient on the logits, skipping the softmax Jacobian
    /// (used with the fused softmax/cross-entropy gradient).
    pub fn backward_from_logits(&self, fwd: &Forward<F>, grad_logits: &Tensor<F>) -> Result<ParamGrads<F>> {
        self.backward_inner(fwd, grad_logits, false)
    }

    fn backward_inner(&self, fwd: &Forward<F>, upstream: &Tensor<F>, through_softmax: bool) -> Result<ParamGrads<F>> {
        let caches = fwd
            .caches
            .as_ref()
            .ok_or_else(|| Error::State("backward needs a train-mode forward pass".into()))?;
        if upstream.shape() != fwd.probs.shape() {
            return Err(Error::dim("model backward", upstream.shape(), fwd.probs.shape()));
        }
        let mut grads: Vec<Vec<Tensor<F>>> = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let mut local = Vec::new();
            g = match (&layer.op, cache) {
                (Op::Softmax, LayerCache::Softmax(p)) => {
                    if through_softmax {
                        softmax_backward(p, &g)?
                    } else {
                        g
                    }
                }
                (Op::Dense(d), LayerCache::Dense(c)) => {
                    let dg = d.backward(c, &g)?;
                    local = vec![dg.weights, dg.bias];
                    dg.input
                }
                (Op::Relu, LayerCache::Relu(c)) => relu_backward(c, &g)?,
                (Op::Lstm(l), LayerCache::Lstm(c)) => {
                    let steps = c.steps().len();
                    let (n, hidden) = (g.shape()[0], g.shape()[1]);
                    let mut up = Tensor::zeros([n, steps, hidden]);
                    for r in 0..n {
                        let dst = (r * steps + steps - 1) * hidden;
                        up.data_mut()[dst..dst + hidden]
                            .copy_from_slice(&g.data()[r * hidden..(r + 1) * hidden]);
                    }
                    let lg = l.backward(c, &up)?;
                    local = lg.params.tensors().into_iter().cloned().collect();
                    lg.seq
                }
                (Op::Sequence { mode, positions }, LayerCache::Sequence) => {
                    from_sequence(&g, *mode, *positions)?
                }
                (Op::Flatten, LayerCache::Flatten(c)) => flatten_backward(c, &g)?,
                (Op::MaxPool(p), LayerCache::MaxPool(c)) => p.backward(c, &g)?,
                (Op::Conv(conv), LayerCache::Conv(c)) => {
                    let cg = conv.backward(c, &g)?;
                    local = vec![cg.weights, cg.bias];
                    cg.input
                }
                _ => return Err(Error::State("cache does not match layer".into())),
            };
            grads.push(local);
        }
        grads.reverse();
        Ok(ParamGrads {
            tensors: grads.into_iter().flatten().collect(),
            input: g,
        })
    }
}

/// `[n, C*P]` (channel-major) to `[n, T, D]`.
fn to_sequence<F: Element>(x: &Tensor<F>, mode: SequenceMode, positions: usize) -> Result<Tensor<F>> {
    let (n, len) = (x.shape()[0], x.shape()[1]);
    match mode {
        SequenceMode::SingleStep => x.clone().reshape([n, 1, len]),
        SequenceMode::Spatial => {
            let channels = len / positions;
            let mut out = vec![F::zero(); x.len()];
            for r in 0..n {
                let src = &x.data()[r * len..(r + 1) * len];
                let dst = &mut out[r * len..(r + 1) * len];
                for c in 0..channels {
                    for t in 0..positions {
                        dst[t * channels + c] = src[c * positions + t];
                    }
                }
            }
            Tensor::new([n, positions, channels], out)
        }
    }
}

fn from_sequence<F: Element>(g: &Tensor<F>, mode: SequenceMode, positions: usize) -> Result<Tensor<F>> {
    let n = g.shape()[0];
    let len = g.len() / n;
    match mode {
        SequenceMode::SingleStep => g.clone().reshape([n, len]),
        SequenceMode::Spatial => {
            let channels = len / positions;
            let mut out = vec![F::zero(); g.len()];
            for r in 0..n {
                let src = &g.data()[r * len..(r + 1) * len];
                let dst = &mut out[r * len..(r + 1) * len];
                for c in 0..channels {
                    for t in 0..positions {
                        dst[c * positions + t] = src[t * channels + c];
                    }
                }
            }
            Tensor::new([n, len], out)
        }
    }
}
