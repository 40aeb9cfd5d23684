//! Two-headed encoder/decoder network.
//!
//! One dense-style encoder with five stride-2 stages feeds two decoders that
//! run in parallel: a depth decoder producing a single-channel map and a
//! deblurring decoder producing an RGB image. Both decoders mirror the
//! encoder with transposed convolutions and skip connections; the
//! deblurring decoder ends in a joint layer that also sees the defocused
//! input.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, Tape, Var};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const STAGES: usize = 5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const IMAGE_CHANNELS: usize = 3;
const INPUT_MEAN: &str = "input.rgb_mean";
const INPUT_STD: &str = "input.rgb_std";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Nominal input size `(height, width)`; any multiple of 32 runs.
    pub input_size: (usize, usize),
    pub channel_schedule: Vec<usize>,
    pub width_scale: f64,
    /// 3x3 convolutions per encoder stage, each fed the concatenation of
    /// every earlier output of the stage.
    pub dense_block_layers: usize,
    pub use_skips: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: (256, 256),
            channel_schedule: vec![64, 128, 256, 512, 1024],
            width_scale: 1.0,
            dense_block_layers: 2,
            use_skips: true,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: 64x64 inputs, channels scaled by 1/8.
    pub fn tiny() -> Self {
        Self {
            input_size: (64, 64),
            width_scale: 0.125,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_schedule.len() != STAGES {
            return Err(Error::Config(format!(
                "channel schedule needs {STAGES} stages, got {}",
                self.channel_schedule.len()
            )));
        }
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return Err(Error::Config(format!(
                "width_scale must lie in (0, 1], got {}",
                self.width_scale
            )));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be a positive multiple of 32"
            )));
        }
        if self.channel_schedule.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Channel counts after applying `width_scale`.
    pub fn scaled_channels(&self) -> Vec<usize> {
        self.channel_schedule
            .iter()
            .map(|&c| ((c as f64 * self.width_scale).round() as usize).max(1))
            .collect()
    }
}

/// Which decoder heads a model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heads {
    pub depth: bool,
    pub aif: bool,
}

impl Heads {
    pub const BOTH: Heads = Heads {
        depth: true,
        aif: true,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Depth,
    Aif,
}

impl Head {
    fn prefix(self) -> &'static str {
        match self {
            Head::Depth => "depth",
            Head::Aif => "aif",
        }
    }
}

/// Structural description a model is built from; recoverable from a
/// checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub channels: [usize; STAGES],
    pub dense_layers: usize,
    pub use_skips: bool,
    pub heads: Heads,
}

impl Architecture {
    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.scaled_channels();
        Ok(Self {
            channels: [c[0], c[1], c[2], c[3], c[4]],
            dense_layers: cfg.dense_block_layers,
            use_skips: cfg.use_skips,
            heads: Heads::BOTH,
        })
    }
}

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Element> NamedTensors<T> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        debug_assert!(self.find(&name).is_none(), "duplicate name {name}");
        self.entries.push((name, t));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.find(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.find(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    /// Mutable access to entries `i` and `i + 1`.
    fn pair_mut(&mut self, i: usize) -> (&mut Tensor<T>, &mut Tensor<T>) {
        let (a, b) = self.entries.split_at_mut(i + 1);
        (&mut a[i].1, &mut b[0].1)
    }

    fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.entries.retain(|(n, _)| keep(n));
    }
}

#[derive(Clone, Debug)]
struct ConvParams {
    weight: usize,
    bias: usize,
    stride: usize,
    padding: usize,
    transposed: bool,
}

#[derive(Clone, Debug)]
struct ConvBnRelu {
    conv: ConvParams,
    gamma: usize,
    beta: usize,
    /// Index of the running mean; the running variance follows it.
    stats: usize,
}

#[derive(Clone, Debug)]
struct EncoderStage {
    down: ConvBnRelu,
    dense: Vec<ConvBnRelu>,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    /// `None` for the resolution-preserving bottleneck.
    up: Option<ConvBnRelu>,
    /// Encoder stage whose output is concatenated after upsampling.
    skip: Option<usize>,
    fuse: ConvBnRelu,
}

#[derive(Clone, Debug)]
struct Decoder {
    stages: Vec<DecoderStage>,
    final_up: ConvBnRelu,
    pred: ConvParams,
}

#[derive(Clone, Debug)]
struct Layers {
    encoder: Vec<EncoderStage>,
    depth: Option<Decoder>,
    aif: Option<Decoder>,
}

/// Parameter and buffer registration with deterministic initialisation.
struct Builder<'a, T> {
    params: NamedTensors<T>,
    buffers: NamedTensors<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Element> Builder<'_, T> {
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        transposed: bool,
    ) -> ConvParams {
        let (shape, fan_in) = if transposed {
            (
                vec![cin, cout, k, k],
                (cin * k * k / (stride * stride)).max(1),
            )
        } else {
            (vec![cout, cin, k, k], cin * k * k)
        };
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(normal.sample(self.rng)))
            .collect();
        let weight = self.params.push(
            format!("{name}.weight"),
            Tensor::new(shape, data).expect("shape"),
        );
        let bias = self
            .params
            .push(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        ConvParams {
            weight,
            bias,
            stride,
            padding,
            transposed,
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, kind: BlockKind) -> ConvBnRelu {
        let conv = match kind {
            BlockKind::Down => self.conv(&format!("{name}.conv"), cin, cout, 4, 2, 1, false),
            BlockKind::Up => self.conv(&format!("{name}.conv"), cin, cout, 4, 2, 1, true),
            BlockKind::Same => self.conv(&format!("{name}.conv"), cin, cout, 3, 1, 1, false),
        };
        let gamma = self.params.push(
            format!("{name}.bn.gamma"),
            Tensor::full(vec![cout], T::one()),
        );
        let beta = self
            .params
            .push(format!("{name}.bn.beta"), Tensor::zeros(vec![cout]));
        let stats = self
            .buffers
            .push(format!("{name}.bn.running_mean"), Tensor::zeros(vec![cout]));
        self.buffers.push(
            format!("{name}.bn.running_var"),
            Tensor::full(vec![cout], T::one()),
        );
        ConvBnRelu {
            conv,
            gamma,
            beta,
            stats,
        }
    }

    fn decoder(&mut self, arch: &Architecture, head: Head) -> Decoder {
        let p = head.prefix();
        let ch = arch.channels;
        let mut stages = vec![DecoderStage {
            up: None,
            skip: None,
            fuse: self.block(&format!("{p}.bottleneck"), ch[4], ch[4], BlockKind::Same),
        }];
        let mut prev = ch[4];
        for s in (0..STAGES - 1).rev() {
            let up = self.block(&format!("{p}.up{s}.deconv"), prev, ch[s], BlockKind::Up);
            let fuse_in = if arch.use_skips { 2 * ch[s] } else { ch[s] };
            let fuse = self.block(&format!("{p}.up{s}.fuse"), fuse_in, ch[s], BlockKind::Same);
            stages.push(DecoderStage {
                up: Some(up),
                skip: arch.use_skips.then_some(s),
                fuse,
            });
            prev = ch[s];
        }
        let final_up = self.block(&format!("{p}.final_up"), ch[0], ch[0], BlockKind::Up);
        let pred = match head {
            Head::Depth => self.conv("depth.pred", ch[0], 1, 3, 1, 1, false),
            Head::Aif => {
                let joint = self.conv(
                    "aif.joint",
                    ch[0] + IMAGE_CHANNELS,
                    IMAGE_CHANNELS,
                    3,
                    1,
                    1,
                    false,
                );
                // Start as a pass-through of the defocused input: zero weights
                // on decoder features, identity centre tap on the input.
                let w = &mut self.params.entries[joint.weight].1;
                let cin = ch[0] + IMAGE_CHANNELS;
                let d = w.data_mut();
                d.iter_mut().for_each(|v| *v = T::zero());
                for c in 0..IMAGE_CHANNELS {
                    d[((c * cin + ch[0] + c) * 3 + 1) * 3 + 1] = T::one();
                }
                joint
            }
        };
        Decoder {
            stages,
            final_up,
            pred,
        }
    }
}

#[derive(Clone, Copy)]
enum BlockKind {
    Down,
    Up,
    Same,
}

/// Batch-norm behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-stage encoder outputs, shallowest first.
#[derive(Clone, Debug)]
pub struct EncoderFeatures(pub Vec<Var>);

/// `(depth, deblurred)` images for the heads a model has.
pub type Prediction<T> = (Option<Tensor<T>>, Option<Tensor<T>>);

#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub depth: Option<Var>,
    pub aif: Option<Var>,
}

enum Stats<'a, T> {
    Train(&'a mut NamedTensors<T>),
    Eval(&'a NamedTensors<T>),
}

struct Ctx<'a, T> {
    tape: &'a mut Tape<T>,
    vars: &'a [Var],
    stats: Stats<'a, T>,
}

impl<T: Element> Ctx<'_, T> {
    fn conv(&mut self, p: &ConvParams, x: Var) -> Result<Var> {
        let (w, b) = (self.vars[p.weight], self.vars[p.bias]);
        if p.transposed {
            self.tape
                .conv_transpose2d(x, w, Some(b), p.stride, p.padding)
        } else {
            self.tape.conv2d(x, w, Some(b), p.stride, p.padding)
        }
    }

    fn block(&mut self, b: &ConvBnRelu, x: Var) -> Result<Var> {
        let y = self.conv(&b.conv, x)?;
        let (g, be) = (self.vars[b.gamma], self.vars[b.beta]);
        let eps = T::from_f64_lossy(BN_EPS);
        let y = match &mut self.stats {
            Stats::Train(bufs) => {
                let (mean, var) = bufs.pair_mut(b.stats);
                let mode = BatchNormMode::Train {
                    running_mean: mean.data_mut(),
                    running_var: var.data_mut(),
                    momentum: T::from_f64_lossy(BN_MOMENTUM),
                };
                self.tape.batch_norm2d(y, g, be, mode, eps)?
            }
            Stats::Eval(bufs) => {
                let mode = BatchNormMode::Eval {
                    running_mean: bufs.tensor(b.stats).data(),
                    running_var: bufs.tensor(b.stats + 1).data(),
                };
                self.tape.batch_norm2d(y, g, be, mode, eps)?
            }
        };
        self.tape.relu(y)
    }
}

/// The two-headed network: parameters, batch-norm buffers and layer wiring.
#[derive(Clone, Debug)]
pub struct Model<T> {
    arch: Architecture,
    params: NamedTensors<T>,
    buffers: NamedTensors<T>,
    layers: Layers,
}

impl<T: Element> Model<T> {
    /// Builds a model with both heads, initialised deterministically from
    /// `seed` (He-normal convolution weights, zero biases, unit batch-norm
    /// scale).
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::from_architecture(Architecture::from_config(config)?, seed)
    }

    pub fn from_architecture(arch: Architecture, seed: u64) -> Result<Self> {
        if arch.channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !arch.heads.depth && !arch.heads.aif {
            return Err(Error::Config("a model needs at least one head".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: NamedTensors::default(),
            buffers: NamedTensors::default(),
            rng: &mut rng,
        };
        let norm = Normalization::default();
        b.buffers.push(
            INPUT_MEAN.into(),
            Tensor::new(vec![3], norm.mean.map(T::from_f64_lossy).to_vec())?,
        );
        b.buffers.push(
            INPUT_STD.into(),
            Tensor::new(vec![3], norm.std.map(T::from_f64_lossy).to_vec())?,
        );
        let ch = arch.channels;
        let mut encoder = Vec::with_capacity(STAGES);
        let mut cin = IMAGE_CHANNELS;
        for (s, &c) in ch.iter().enumerate() {
            let down = b.block(&format!("encoder.{s}.down"), cin, c, BlockKind::Down);
            let dense = (1..=arch.dense_layers)
                .map(|j| b.block(&format!("encoder.{s}.dense{j}"), c * j, c, BlockKind::Same))
                .collect();
            encoder.push(EncoderStage { down, dense });
            cin = c;
        }
        // Both decoders are always drawn so each head's initial weights do
        // not depend on whether the other one exists.
        let depth = b.decoder(&arch, Head::Depth);
        let aif = b.decoder(&arch, Head::Aif);
        let mut model = Self {
            params: b.params,
            buffers: b.buffers,
            layers: Layers {
                encoder,
                depth: Some(depth),
                aif: Some(aif),
            },
            arch: Architecture {
                heads: Heads::BOTH,
                ..arch.clone()
            },
        };
        if !arch.heads.depth {
            model = model.without_head(Head::Depth)?;
        }
        if !arch.heads.aif {
            model = model.without_head(Head::Aif)?;
        }
        Ok(model)
    }

    /// Drops one decoder and its parameters. The shared encoder and the
    /// other head are untouched.
    pub fn without_head(&self, head: Head) -> Result<Self> {
        let mut heads = self.arch.heads;
        match head {
            Head::Depth => heads.depth = false,
            Head::Aif => heads.aif = false,
        }
        if !heads.depth && !heads.aif {
            return Err(Error::Config("cannot remove the last head".into()));
        }
        let prefix = format!("{}.", head.prefix());
        let mut params = self.params.clone();
        let mut buffers = self.buffers.clone();
        params.retain(|n| !n.starts_with(&prefix));
        buffers.retain(|n| !n.starts_with(&prefix));
        let arch = Architecture {
            heads,
            ..self.arch.clone()
        };
        // Rebuild the wiring against the new indices.
        let mut rebuilt = Self::from_architecture_raw(&arch)?;
        for (name, t) in params.iter() {
            *rebuilt.params.get_mut(name).ok_or_else(|| missing(name))? = t.clone();
        }
        for (name, t) in buffers.iter() {
            *rebuilt.buffers.get_mut(name).ok_or_else(|| missing(name))? = t.clone();
        }
        Ok(rebuilt)
    }

    /// Model with the right names, shapes and wiring; values come from seed 0.
    fn from_architecture_raw(arch: &Architecture) -> Result<Self> {
        let both = Self::from_architecture(
            Architecture {
                heads: Heads::BOTH,
                ..arch.clone()
            },
            0,
        )?;
        if arch.heads == Heads::BOTH {
            return Ok(both);
        }
        let dropped = if arch.heads.depth {
            Head::Aif
        } else {
            Head::Depth
        };
        let prefix = format!("{}.", dropped.prefix());
        let mut params = NamedTensors::default();
        let mut buffers = NamedTensors::default();
        let mut pmap = vec![usize::MAX; both.params.len()];
        let mut bmap = vec![usize::MAX; both.buffers.len()];
        for (i, (n, t)) in both.params.iter().enumerate() {
            if !n.starts_with(&prefix) {
                pmap[i] = params.push(n.to_string(), t.clone());
            }
        }
        for (i, (n, t)) in both.buffers.iter().enumerate() {
            if !n.starts_with(&prefix) {
                bmap[i] = buffers.push(n.to_string(), t.clone());
            }
        }
        let remap = |l: &Layers| -> Layers {
            let conv = |c: &ConvParams| ConvParams {
                weight: pmap[c.weight],
                bias: pmap[c.bias],
                ..c.clone()
            };
            let block = |b: &ConvBnRelu| ConvBnRelu {
                conv: conv(&b.conv),
                gamma: pmap[b.gamma],
                beta: pmap[b.beta],
                stats: bmap[b.stats],
            };
            let dec = |d: &Decoder| Decoder {
                stages: d
                    .stages
                    .iter()
                    .map(|s| DecoderStage {
                        up: s.up.as_ref().map(block),
                        skip: s.skip,
                        fuse: block(&s.fuse),
                    })
                    .collect(),
                final_up: block(&d.final_up),
                pred: conv(&d.pred),
            };
            Layers {
                encoder: l
                    .encoder
                    .iter()
                    .map(|s| EncoderStage {
                        down: block(&s.down),
                        dense: s.dense.iter().map(block).collect(),
                    })
                    .collect(),
                depth: if arch.heads.depth {
                    l.depth.as_ref().map(dec)
                } else {
                    None
                },
                aif: if arch.heads.aif {
                    l.aif.as_ref().map(dec)
                } else {
                    None
                },
            }
        };
        Ok(Self {
            layers: remap(&both.layers),
            arch: arch.clone(),
            params,
            buffers,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn heads(&self) -> Heads {
        self.arch.heads
    }

    pub fn params(&self) -> &NamedTensors<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NamedTensors<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &NamedTensors<T> {
        &self.buffers
    }

    /// Total number of trainable scalars (batch-norm running statistics
    /// excluded).
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// `(input channels, output channels)` of every encoder stage.
    pub fn encoder_channels(&self) -> Vec<(usize, usize)> {
        self.layers
            .encoder
            .iter()
            .map(|s| {
                let w = self.params.tensor(s.down.conv.weight).shape();
                (w[1], w[0])
            })
            .collect()
    }

    /// `(input channels, output channels)` of the decoder stages of `head`,
    /// deepest first, followed by the prediction layer.
    pub fn decoder_channels(&self, head: Head) -> Option<Vec<(usize, usize)>> {
        let dec = match head {
            Head::Depth => self.layers.depth.as_ref()?,
            Head::Aif => self.layers.aif.as_ref()?,
        };
        let mut out: Vec<(usize, usize)> = dec
            .stages
            .iter()
            .map(|s| {
                let cin = match &s.up {
                    Some(up) => self.params.tensor(up.conv.weight).shape()[0],
                    None => self.params.tensor(s.fuse.conv.weight).shape()[1],
                };
                (cin, self.params.tensor(s.fuse.conv.weight).shape()[0])
            })
            .collect();
        let w = self.params.tensor(dec.pred.weight).shape();
        out.push((w[1], w[0]));
        Some(out)
    }

    /// Sets every bias of the final prediction layer of `head`.
    pub fn set_prediction_bias(&mut self, head: Head, value: T) -> Result<()> {
        let name = match head {
            Head::Depth => "depth.pred.bias",
            Head::Aif => "aif.joint.bias",
        };
        let b = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("model has no `{name}`")))?;
        b.data_mut().iter_mut().for_each(|v| *v = value);
        Ok(())
    }

    /// Records every parameter on `tape`. With `trainable`, the leaves
    /// collect gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| {
                let mut leaf = t.clone();
                leaf.zero_grad();
                tape.leaf(leaf.with_requires_grad(trainable))
            })
            .collect()
    }

    /// Copies the gradients accumulated on `tape` into the parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, vars: &[Var]) -> Result<()> {
        for (p, &v) in self.params.tensors_mut().zip(vars) {
            if let Some(g) = tape.grad(v)? {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.tensors_mut().for_each(Tensor::zero_grad);
    }

    fn ctx<'a>(
        &'a mut self,
        tape: &'a mut Tape<T>,
        vars: &'a [Var],
        mode: Mode,
    ) -> (Ctx<'a, T>, &'a Layers) {
        let stats = match mode {
            Mode::Train => Stats::Train(&mut self.buffers),
            Mode::Eval => Stats::Eval(&self.buffers),
        };
        (Ctx { tape, vars, stats }, &self.layers)
    }

    fn check_vars(&self, vars: &[Var]) -> Result<()> {
        if vars.len() != self.params.len() {
            return Err(Error::Config(format!(
                "expected {} bound parameters, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        Ok(())
    }

    /// Runs the encoder on an `[n, 3, h, w]` image with `h`, `w` divisible
    /// by 32.
    pub fn encode(
        &mut self,
        tape: &mut Tape<T>,
        vars: &[Var],
        image: Var,
        mode: Mode,
    ) -> Result<EncoderFeatures> {
        self.check_vars(vars)?;
        let (mut ctx, layers) = self.ctx(tape, vars, mode);
        encode(&mut ctx, layers, image)
    }

    pub fn decode_depth(
        &mut self,
        tape: &mut Tape<T>,
        vars: &[Var],
        features: &EncoderFeatures,
        mode: Mode,
    ) -> Result<Var> {
        self.check_vars(vars)?;
        let (mut ctx, layers) = self.ctx(tape, vars, mode);
        let dec = layers
            .depth
            .as_ref()
            .ok_or_else(|| Error::Config("model has no depth head".into()))?;
        decode(&mut ctx, dec, features, None)
    }

    pub fn decode_aif(
        &mut self,
        tape: &mut Tape<T>,
        vars: &[Var],
        features: &EncoderFeatures,
        defocused: Var,
        mode: Mode,
    ) -> Result<Var> {
        self.check_vars(vars)?;
        let (mut ctx, layers) = self.ctx(tape, vars, mode);
        let dec = layers
            .aif
            .as_ref()
            .ok_or_else(|| Error::Config("model has no deblurring head".into()))?;
        decode(&mut ctx, dec, features, Some(defocused))
    }

    /// Encoder plus every present head. `image` is the (normalised) network
    /// input; `defocused` is the raw defocused image fed to the joint layer.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        vars: &[Var],
        image: Var,
        defocused: Var,
        mode: Mode,
    ) -> Result<Outputs> {
        self.check_vars(vars)?;
        let (mut ctx, layers) = self.ctx(tape, vars, mode);
        let features = encode(&mut ctx, layers, image)?;
        let depth = layers
            .depth
            .as_ref()
            .map(|d| decode(&mut ctx, d, &features, None))
            .transpose()?;
        let aif = layers
            .aif
            .as_ref()
            .map(|d| decode(&mut ctx, d, &features, Some(defocused)))
            .transpose()?;
        Ok(Outputs { depth, aif })
    }

    /// Per-channel statistics the network input is standardised with.
    pub fn normalization(&self) -> Normalization {
        let get = |n: &str| {
            let d = self.buffers.get(n).expect("normalisation buffer").data();
            [d[0].as_f64(), d[1].as_f64(), d[2].as_f64()]
        };
        Normalization {
            mean: get(INPUT_MEAN),
            std: get(INPUT_STD),
        }
    }

    pub fn set_normalization(&mut self, norm: &Normalization) {
        let mut set = |n: &str, v: [f64; 3]| {
            let t = self.buffers.get_mut(n).expect("normalisation buffer");
            t.data_mut()
                .iter_mut()
                .zip(v)
                .for_each(|(d, v)| *d = T::from_f64_lossy(v));
        };
        set(INPUT_MEAN, norm.mean);
        set(INPUT_STD, norm.std);
    }

    /// Standardises a raw `[n, 3, h, w]` image with [`Self::normalization`].
    pub fn standardize(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, c, h, w] = image.dims4()?;
        if c != IMAGE_CHANNELS {
            return Err(Error::ShapeMismatch {
                op: "standardize",
                lhs: image.shape().to_vec(),
                rhs: vec![IMAGE_CHANNELS],
            });
        }
        let norm = self.normalization();
        let mut out = image.clone();
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let (m, s) = (
                T::from_f64_lossy(norm.mean[i % 3]),
                T::from_f64_lossy(norm.std[i % 3]),
            );
            plane.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(out)
    }

    /// Evaluation-mode prediction from a raw defocused `[n, 3, h, w]` image
    /// in `[0, 1]`: returns `(depth, deblurred)` for the heads present.
    pub fn predict(&self, defocused: &Tensor<T>) -> Result<Prediction<T>> {
        let input = self.standardize(defocused)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(input);
        let d = tape.constant(defocused.clone());
        let mut ctx = Ctx {
            tape: &mut tape,
            vars: &vars,
            stats: Stats::Eval(&self.buffers),
        };
        let features = encode(&mut ctx, &self.layers, x)?;
        let depth = self
            .layers
            .depth
            .as_ref()
            .map(|dec| decode(&mut ctx, dec, &features, None))
            .transpose()?;
        let aif = self
            .layers
            .aif
            .as_ref()
            .map(|dec| decode(&mut ctx, dec, &features, Some(d)))
            .transpose()?;
        let take = |v: Option<Var>| -> Result<Option<Tensor<T>>> {
            v.map(|v| tape.value(v).map(|t| t.clone().with_requires_grad(false)))
                .transpose()
        };
        Ok((take(depth)?, take(aif)?))
    }

    /// Named parameters followed by named buffers, in registration order.
    pub fn state(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().chain(self.buffers.iter())
    }

    /// Rebuilds a model from named tensors, inferring the architecture from
    /// names and shapes.
    pub fn from_state(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let lookup = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let mut channels = [0; STAGES];
        for (s, c) in channels.iter_mut().enumerate() {
            let w = lookup(&format!("encoder.{s}.down.conv.weight"))
                .ok_or_else(|| missing(&format!("encoder.{s}.down.conv.weight")))?;
            *c = w.shape()[0];
        }
        let dense_layers = (1..)
            .take_while(|j| lookup(&format!("encoder.0.dense{j}.conv.weight")).is_some())
            .count();
        let heads = Heads {
            depth: lookup("depth.pred.weight").is_some(),
            aif: lookup("aif.joint.weight").is_some(),
        };
        let head = if heads.depth { "depth" } else { "aif" };
        let fuse = lookup(&format!("{head}.up0.fuse.conv.weight"))
            .ok_or_else(|| missing(&format!("{head}.up0.fuse.conv.weight")))?;
        let use_skips = fuse.shape()[1] == 2 * fuse.shape()[0];
        let arch = Architecture {
            channels,
            dense_layers,
            use_skips,
            heads,
        };
        let mut model = Self::from_architecture_raw(&arch)?;
        let expected = model.params.len() + model.buffers.len();
        if entries.len() != expected {
            return Err(Error::Data(format!(
                "state has {} tensors, architecture {:?} expects {expected}",
                entries.len(),
                arch
            )));
        }
        for (name, t) in entries {
            let slot = match model.params.get_mut(&name) {
                Some(s) => s,
                None => model.buffers.get_mut(&name).ok_or_else(|| missing(&name))?,
            };
            if slot.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load",
                    lhs: slot.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *slot = t;
        }
        Ok(model)
    }
}

fn missing(name: &str) -> Error {
    Error::Data(format!("missing tensor `{name}`"))
}

fn encode<T: Element>(
    ctx: &mut Ctx<'_, T>,
    layers: &Layers,
    image: Var,
) -> Result<EncoderFeatures> {
    let [_, c, h, w] = ctx.tape.value(image)?.dims4()?;
    if c != IMAGE_CHANNELS {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: ctx.tape.shape(image)?.to_vec(),
            rhs: vec![IMAGE_CHANNELS],
        });
    }
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Geometry(format!(
            "input {h}x{w} is not divisible by 32"
        )));
    }
    let mut x = image;
    let mut features = Vec::with_capacity(STAGES);
    for stage in &layers.encoder {
        let down = ctx.block(&stage.down, x)?;
        let mut concat = down;
        let mut out = down;
        for (j, layer) in stage.dense.iter().enumerate() {
            out = ctx.block(layer, concat)?;
            if j + 1 < stage.dense.len() {
                concat = ctx.tape.concat_channels(concat, out)?;
            }
        }
        features.push(out);
        x = out;
    }
    Ok(EncoderFeatures(features))
}

fn decode<T: Element>(
    ctx: &mut Ctx<'_, T>,
    dec: &Decoder,
    features: &EncoderFeatures,
    defocused: Option<Var>,
) -> Result<Var> {
    if features.0.len() != STAGES {
        return Err(Error::Config(format!(
            "expected {STAGES} encoder features, got {}",
            features.0.len()
        )));
    }
    let mut x = features.0[STAGES - 1];
    for stage in &dec.stages {
        if let Some(up) = &stage.up {
            x = ctx.block(up, x)?;
        }
        if let Some(s) = stage.skip {
            x = ctx.tape.concat_channels(x, features.0[s])?;
        }
        x = ctx.block(&stage.fuse, x)?;
    }
    x = ctx.block(&dec.final_up, x)?;
    if let Some(d) = defocused {
        x = ctx.tape.concat_channels(x, d)?;
    }
    ctx.conv(&dec.pred, x)
}
