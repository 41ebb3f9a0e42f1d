//! Parameterized layers and the two convolutional block kinds.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SegError};
use crate::nn::{self, BatchNormState, ConvParams, Mode, Padding, BN_EPSILON, BN_MOMENTUM};
use crate::ops;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Batch-norm running statistics: persisted, never optimized.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Named parameters in registration order.
pub type ParamStore = IndexMap<String, Param>;

/// Parameter values for one forward pass, possibly tracked on a tape.
pub type Binding = IndexMap<String, Tensor>;

pub(crate) fn bind(params: &ParamStore, tape: &mut Tape, track: bool) -> Binding {
    params
        .iter()
        .map(|(name, p)| {
            let t = if track && p.kind == ParamKind::Trainable {
                tape.watch(&p.value)
            } else {
                p.value.detach()
            };
            (name.clone(), t)
        })
        .collect()
}

pub(crate) fn set_param(params: &mut ParamStore, name: &str, value: Tensor) -> Result<()> {
    let slot = params
        .get_mut(name)
        .ok_or_else(|| SegError::InvalidArgument(format!("no parameter named `{name}`")))?;
    if slot.value.shape() != value.shape() {
        return Err(SegError::ShapeMismatch {
            op: "set_param",
            left: slot.value.shape(),
            right: value.shape(),
        });
    }
    slot.value = value.detach();
    Ok(())
}

pub(crate) fn trainable_count(params: &ParamStore) -> usize {
    params
        .values()
        .filter(|p| p.kind == ParamKind::Trainable)
        .map(|p| p.value.numel())
        .sum()
}

/// Where a block sits in a network, for forward-pass traces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Encoder(usize),
    Bottleneck,
    Decoder(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceEvent {
    Block {
        stage: Stage,
        out_channels: usize,
        height: usize,
        width: usize,
    },
    Pool { level: usize },
    Unpool { level: usize },
    Concat { level: usize },
    Score { level: usize },
}

/// Mutable state threaded through one forward pass.
pub(crate) struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a Binding,
    pub mode: Mode,
    pub bn_updates: Vec<(String, Tensor)>,
    pub trace: Vec<TraceEvent>,
    /// Residual blocks return their first-conv output, skipping BN and the
    /// residual convolutions entirely.
    pub bypass_residual: bool,
    pub first_conv: Option<Tensor>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a Binding, mode: Mode) -> Self {
        Ctx {
            tape,
            params,
            mode,
            bn_updates: Vec::new(),
            trace: Vec::new(),
            bypass_residual: false,
            first_conv: None,
        }
    }

    fn get(&self, name: &str) -> Result<Tensor> {
        self.params
            .get(name)
            .cloned()
            .ok_or_else(|| SegError::InvalidArgument(format!("missing parameter `{name}`")))
    }
}

/// Parameter initialization source.
pub(crate) enum Init<'r> {
    Random(&'r mut ChaCha8Rng),
    Zeros,
}

/// Registers parameters while a network is being assembled.
pub(crate) struct Registry<'r> {
    pub params: ParamStore,
    init: Init<'r>,
}

impl<'r> Registry<'r> {
    pub fn new(init: Init<'r>) -> Self {
        Registry {
            params: ParamStore::new(),
            init,
        }
    }

    fn add(&mut self, name: String, value: Tensor, kind: ParamKind) -> String {
        debug_assert!(!self.params.contains_key(&name), "duplicate parameter {name}");
        self.params.insert(name.clone(), Param { value, kind });
        name
    }

    fn normal(&mut self, shape: Shape, std: f64) -> Tensor {
        match &mut self.init {
            Init::Random(rng) => Tensor::randn(shape, std, *rng),
            Init::Zeros => Tensor::zeros(shape),
        }
    }

    /// He-normal (fan-in) weights, zero bias.
    pub fn conv(&mut self, name: &str, in_c: usize, out_c: usize, k: usize) -> Conv {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        let w = self.normal(Shape::new(out_c, in_c, k, k), std);
        Conv {
            weight: self.add(format!("{name}.weight"), w, ParamKind::Trainable),
            bias: self.add(
                format!("{name}.bias"),
                Tensor::zeros(Shape::new(1, out_c, 1, 1)),
                ParamKind::Trainable,
            ),
        }
    }

    /// Transposed convolution with `k = stride`, mapping `in_c → out_c`.
    ///
    /// With non-overlapping taps a bilinear-equivalent kernel is nearest
    /// replication; input channel `i` feeds output `i mod out_c`, averaged,
    /// plus small Gaussian noise.
    pub fn deconv(&mut self, name: &str, in_c: usize, out_c: usize, stride: usize) -> Deconv {
        let shape = Shape::new(in_c, out_c, stride, stride);
        let noise_std = 0.1 / (in_c as f64).sqrt();
        let share = out_c as f64 / in_c as f64;
        let w = match &mut self.init {
            Init::Random(rng) => Tensor::from_fn(shape, |i, o, _, _| {
                let z: f64 = StandardNormal.sample(*rng);
                let base = if i % out_c == o { share.min(1.0) } else { 0.0 };
                base + noise_std * z
            }),
            Init::Zeros => Tensor::zeros(shape),
        };
        Deconv {
            weight: self.add(format!("{name}.weight"), w, ParamKind::Trainable),
            bias: self.add(
                format!("{name}.bias"),
                Tensor::zeros(Shape::new(1, out_c, 1, 1)),
                ParamKind::Trainable,
            ),
            stride,
        }
    }

    pub fn bn(&mut self, name: &str, c: usize) -> Bn {
        let s = Shape::new(1, c, 1, 1);
        let ones = || Tensor::ones(s);
        let zeros = || Tensor::zeros(s);
        self.add(format!("{name}.gamma"), ones(), ParamKind::Trainable);
        self.add(format!("{name}.beta"), zeros(), ParamKind::Trainable);
        self.add(format!("{name}.running_mean"), zeros(), ParamKind::Buffer);
        self.add(format!("{name}.running_var"), ones(), ParamKind::Buffer);
        Bn {
            prefix: name.to_string(),
        }
    }

    pub fn conv_block(&mut self, name: &str, in_c: usize, out_c: usize) -> Block {
        Block::Plain(ConvBlock {
            conv1: self.conv(&format!("{name}.conv1"), in_c, out_c, 3),
            conv2: self.conv(&format!("{name}.conv2"), out_c, out_c, 3),
            out_c,
        })
    }

    pub fn residual_block(&mut self, name: &str, in_c: usize, out_c: usize) -> Block {
        Block::Residual(ResidualBlock {
            pre: self.conv(&format!("{name}.pre"), in_c, out_c, 1),
            conv1: self.conv(&format!("{name}.conv1"), out_c, out_c, 3),
            bn1: self.bn(&format!("{name}.bn1"), out_c),
            conv2: self.conv(&format!("{name}.conv2"), out_c, out_c, 3),
            bn2: self.bn(&format!("{name}.bn2"), out_c),
            conv3: self.conv(&format!("{name}.conv3"), out_c, out_c, 3),
            out_c,
        })
    }
}

/// Same-padded, stride-1 convolution.
#[derive(Clone, Debug)]
pub(crate) struct Conv {
    weight: String,
    bias: String,
}

impl Conv {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Tensor) -> Result<Tensor> {
        let p = ConvParams::new(ctx.get(&self.weight)?, ctx.get(&self.bias)?, 1, Padding::Same)?;
        nn::conv2d(ctx.tape, x, &p)
    }

    pub fn param_names(&self) -> [&str; 2] {
        [&self.weight, &self.bias]
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Deconv {
    weight: String,
    bias: String,
    stride: usize,
}

impl Deconv {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Tensor) -> Result<Tensor> {
        let p = ConvParams::transposed(ctx.get(&self.weight)?, ctx.get(&self.bias)?, self.stride)?;
        nn::conv2d_transpose(ctx.tape, x, &p, self.stride)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Bn {
    prefix: String,
}

impl Bn {
    fn name(&self, field: &str) -> String {
        format!("{}.{field}", self.prefix)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Tensor) -> Result<Tensor> {
        let mut st = BatchNormState {
            gamma: ctx.get(&self.name("gamma"))?,
            beta: ctx.get(&self.name("beta"))?,
            running_mean: ctx.get(&self.name("running_mean"))?,
            running_var: ctx.get(&self.name("running_var"))?,
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
            mode: ctx.mode,
        };
        let y = nn::batch_norm2d(ctx.tape, x, &mut st)?;
        if ctx.mode == Mode::Train {
            ctx.bn_updates.push((self.name("running_mean"), st.running_mean));
            ctx.bn_updates.push((self.name("running_var"), st.running_var));
        }
        Ok(y)
    }
}

/// Two 3×3 conv + ReLU layers.
#[derive(Clone, Debug)]
pub(crate) struct ConvBlock {
    conv1: Conv,
    conv2: Conv,
    out_c: usize,
}

/// 1×1 channel projection, a first 3×3 conv giving `y₁`, then
/// `y₁ + conv(relu(bn(conv(relu(bn(y₁))))))`.
#[derive(Clone, Debug)]
pub(crate) struct ResidualBlock {
    pre: Conv,
    conv1: Conv,
    bn1: Bn,
    conv2: Conv,
    bn2: Bn,
    conv3: Conv,
    out_c: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum Block {
    Plain(ConvBlock),
    Residual(ResidualBlock),
}

impl Block {
    pub fn out_channels(&self) -> usize {
        match self {
            Block::Plain(b) => b.out_c,
            Block::Residual(b) => b.out_c,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Tensor) -> Result<Tensor> {
        match self {
            Block::Plain(b) => {
                let h = b.conv1.forward(ctx, x)?;
                let h = ops::relu(ctx.tape, &h)?;
                let h = b.conv2.forward(ctx, &h)?;
                ops::relu(ctx.tape, &h)
            }
            Block::Residual(b) => {
                let p = b.pre.forward(ctx, x)?;
                let y1 = b.conv1.forward(ctx, &p)?;
                ctx.first_conv = Some(y1.clone());
                if ctx.bypass_residual {
                    return Ok(y1);
                }
                let r = b.bn1.forward(ctx, &y1)?;
                let r = ops::relu(ctx.tape, &r)?;
                let r = b.conv2.forward(ctx, &r)?;
                let r = b.bn2.forward(ctx, &r)?;
                let r = ops::relu(ctx.tape, &r)?;
                let r = b.conv3.forward(ctx, &r)?;
                ops::add(ctx.tape, &y1, &r)
            }
        }
    }

    /// Weights and biases of the two convolutions on the residual path.
    pub fn residual_path_params(&self) -> Vec<String> {
        match self {
            Block::Plain(_) => Vec::new(),
            Block::Residual(b) => b
                .conv2
                .param_names()
                .into_iter()
                .chain(b.conv3.param_names())
                .map(str::to_string)
                .collect(),
        }
    }
}

/// A standalone conv or residual block with its own parameters.
#[derive(Clone, Debug)]
pub struct Fragment {
    params: ParamStore,
    block: Block,
}

/// Output of [`Fragment::forward`].
#[derive(Clone, Debug)]
pub struct FragmentOutput {
    pub output: Tensor,
    /// `y₁` of a residual block; `None` for plain blocks.
    pub first_conv: Option<Tensor>,
    pub bn_updates: Vec<(String, Tensor)>,
}

/// Two 3×3 conv + ReLU layers, `in_c → out_c`, same padding.
pub fn build_conv_block<R: Rng>(in_c: usize, out_c: usize, rng: &mut R) -> Fragment {
    let mut chacha = fragment_rng(rng);
    let mut reg = Registry::new(Init::Random(&mut chacha));
    let block = reg.conv_block("block", in_c, out_c);
    Fragment {
        params: reg.params,
        block,
    }
}

/// Identity-mapping residual block, `F_in → F_out`, same padding.
pub fn build_residual_block<R: Rng>(in_c: usize, out_c: usize, rng: &mut R) -> Fragment {
    let mut chacha = fragment_rng(rng);
    let mut reg = Registry::new(Init::Random(&mut chacha));
    let block = reg.residual_block("block", in_c, out_c);
    Fragment {
        params: reg.params,
        block,
    }
}

fn fragment_rng<R: Rng>(rng: &mut R) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(rng.random())
}

impl Fragment {
    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        set_param(&mut self.params, name, value)
    }

    pub fn parameter_count(&self) -> usize {
        trainable_count(&self.params)
    }

    pub fn out_channels(&self) -> usize {
        self.block.out_channels()
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> Binding {
        bind(&self.params, tape, track)
    }

    /// Zeros the weights and biases of the residual-path convolutions.
    pub fn zero_residual_path(&mut self) {
        for name in self.block.residual_path_params() {
            let p = self.params.get_mut(&name).expect("registered");
            p.value = Tensor::zeros(p.value.shape());
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<FragmentOutput> {
        let binding = bind(&self.params, tape, false);
        self.forward_bound(tape, &binding, x, mode)
    }

    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: &Tensor,
        mode: Mode,
    ) -> Result<FragmentOutput> {
        let mut ctx = Ctx::new(tape, binding, mode);
        let output = self.block.forward(&mut ctx, x)?;
        Ok(FragmentOutput {
            output,
            first_conv: ctx.first_conv,
            bn_updates: ctx.bn_updates,
        })
    }
}
