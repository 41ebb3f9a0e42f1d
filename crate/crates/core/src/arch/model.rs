use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    bind, set_param, trainable_count, Binding, Block, Conv, Ctx, Deconv, Init, ParamKind,
    ParamStore, Registry, Stage, TraceEvent,
};
use super::spec::{ArchitectureSpec, Family, FCN_STAGES};
use crate::error::{Result, SegError};
use crate::labels::LabelMap;
use crate::nn::{self, Mode};
use crate::ops;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug)]
enum Network {
    /// U-Net and residual U-Net; `ups[k]`/`dec[k]` restore level `k`.
    UNet {
        enc: Vec<Block>,
        bottleneck: Block,
        ups: Vec<Deconv>,
        dec: Vec<Block>,
        head: Conv,
    },
    SegNet {
        enc: Vec<Block>,
        dec: Vec<Block>,
        head: Conv,
    },
    /// `scores[0]` reads the /32 map, `scores[1]` /16, `scores[2]` /8.
    Fcn {
        stages: Vec<Block>,
        scores: Vec<Conv>,
        fuse: Vec<Deconv>,
        upsample: Deconv,
    },
}

/// A built segmentation network and its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ArchitectureSpec,
    params: ParamStore,
    net: Network,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `(n, num_classes, h, w)` channel-softmax probabilities.
    pub probs: Tensor,
    /// New running statistics produced in train mode.
    pub bn_updates: Vec<(String, Tensor)>,
    pub trace: Vec<TraceEvent>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Residual blocks output their first-conv activation directly.
    pub bypass_residual: bool,
}

fn assemble(spec: &ArchitectureSpec, init: Init<'_>) -> Result<Model> {
    spec.validate()?;
    let mut reg = Registry::new(init);
    let f = spec.encoder_filters();
    let k = spec.num_classes;
    let net = match spec.family {
        Family::Unet | Family::Resunet => {
            let residual = spec.family == Family::Resunet;
            let block = |reg: &mut Registry<'_>, name: &str, i: usize, o: usize| {
                if residual {
                    reg.residual_block(name, i, o)
                } else {
                    reg.conv_block(name, i, o)
                }
            };
            let mut enc = Vec::with_capacity(spec.depth);
            let mut in_c = spec.in_channels;
            for lvl in 0..spec.depth {
                enc.push(block(&mut reg, &format!("enc{lvl}"), in_c, f[lvl]));
                in_c = f[lvl];
            }
            let bottleneck = block(&mut reg, "bottleneck", in_c, f[spec.depth]);
            let mut ups = Vec::with_capacity(spec.depth);
            let mut dec = Vec::with_capacity(spec.depth);
            for lvl in 0..spec.depth {
                ups.push(reg.deconv(&format!("dec{lvl}.up"), f[lvl + 1], f[lvl], 2));
                dec.push(block(&mut reg, &format!("dec{lvl}"), 2 * f[lvl], f[lvl]));
            }
            let head = reg.conv("head", f[0], k, 1);
            Network::UNet {
                enc,
                bottleneck,
                ups,
                dec,
                head,
            }
        }
        Family::Segnet => {
            let mut enc = Vec::with_capacity(spec.depth);
            let mut in_c = spec.in_channels;
            for lvl in 0..spec.depth {
                enc.push(reg.conv_block(&format!("enc{lvl}"), in_c, f[lvl]));
                in_c = f[lvl];
            }
            let dec = (0..spec.depth)
                .map(|lvl| reg.conv_block(&format!("dec{lvl}"), f[lvl], f[lvl.saturating_sub(1)]))
                .collect();
            let head = reg.conv("head", f[0], k, 1);
            Network::SegNet { enc, dec, head }
        }
        Family::Fcn(stride) => {
            let mut stages = Vec::with_capacity(FCN_STAGES);
            let mut in_c = spec.in_channels;
            for (s, &width) in f.iter().enumerate() {
                stages.push(reg.conv_block(&format!("stage{s}"), in_c, width));
                in_c = width;
            }
            let levels = stride.fused_levels();
            let scores = (0..levels)
                .map(|j| reg.conv(&format!("score{}", 32 >> j), f[FCN_STAGES - 1 - j], k, 1))
                .collect();
            let fuse = (1..levels)
                .map(|j| reg.deconv(&format!("fuse{}", 32 >> j), k, k, 2))
                .collect();
            let upsample = reg.deconv("upsample", k, k, stride.value());
            Network::Fcn {
                stages,
                scores,
                fuse,
                upsample,
            }
        }
    };
    Ok(Model {
        spec: *spec,
        params: reg.params,
        net,
    })
}

fn require_family(spec: &ArchitectureSpec, ok: bool, expected: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(SegError::InvalidArgument(format!(
            "expected a {expected} spec, got {}",
            spec.family
        )))
    }
}

pub fn build_unet(spec: &ArchitectureSpec, seed: u64) -> Result<Model> {
    require_family(spec, spec.family == Family::Unet, "unet")?;
    Model::build(spec, seed)
}

pub fn build_resunet(spec: &ArchitectureSpec, seed: u64) -> Result<Model> {
    require_family(spec, spec.family == Family::Resunet, "resunet")?;
    Model::build(spec, seed)
}

pub fn build_segnet(spec: &ArchitectureSpec, seed: u64) -> Result<Model> {
    require_family(spec, spec.family == Family::Segnet, "segnet")?;
    Model::build(spec, seed)
}

pub fn build_fcn(spec: &ArchitectureSpec, seed: u64) -> Result<Model> {
    require_family(spec, matches!(spec.family, Family::Fcn(_)), "fcn")?;
    Model::build(spec, seed)
}

impl Model {
    /// Builds any family with parameters drawn from `seed`.
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        assemble(spec, Init::Random(&mut rng))
    }

    /// Same layout with all-zero weights (used when loading checkpoints).
    pub(crate) fn skeleton(spec: &ArchitectureSpec) -> Result<Model> {
        assemble(spec, Init::Zeros)
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        set_param(&mut self.params, name, value)
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        trainable_count(&self.params)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.params
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(n, _)| n.as_str())
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> Binding {
        bind(&self.params, tape, track)
    }

    pub fn has_batch_norm(&self) -> bool {
        self.spec.family == Family::Resunet
    }

    /// Zeros every residual-path convolution (no-op for plain families).
    pub fn zero_residual_paths(&mut self) {
        let names: Vec<String> = self.blocks().flat_map(Block::residual_path_params).collect();
        for name in names {
            let p = self.params.get_mut(&name).expect("registered");
            p.value = Tensor::zeros(p.value.shape());
        }
    }

    fn blocks(&self) -> Box<dyn Iterator<Item = &Block> + '_> {
        match &self.net {
            Network::UNet {
                enc,
                bottleneck,
                dec,
                ..
            } => Box::new(enc.iter().chain(std::iter::once(bottleneck)).chain(dec.iter())),
            Network::SegNet { enc, dec, .. } => Box::new(enc.iter().chain(dec.iter())),
            Network::Fcn { stages, .. } => Box::new(stages.iter()),
        }
    }

    pub fn apply_bn_updates(&mut self, updates: Vec<(String, Tensor)>) -> Result<()> {
        for (name, value) in updates {
            self.set_param(&name, value)?;
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let d = self.spec.divisor();
        if s.c != self.spec.in_channels {
            return Err(SegError::InvalidShape {
                op: "forward",
                reason: format!("expected {} input channels, got {s}", self.spec.in_channels),
            });
        }
        if s.n == 0 || s.h == 0 || s.w == 0 || !s.h.is_multiple_of(d) || !s.w.is_multiple_of(d) {
            return Err(SegError::InvalidShape {
                op: "forward",
                reason: format!("spatial dims of {s} must be non-zero multiples of {d}"),
            });
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, binding: &Binding, x: &Tensor, mode: Mode) -> Result<ForwardPass> {
        self.forward_with(tape, binding, x, mode, ForwardOptions::default())
    }

    pub fn forward_with(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: &Tensor,
        mode: Mode,
        opts: ForwardOptions,
    ) -> Result<ForwardPass> {
        self.check_input(x)?;
        let mut ctx = Ctx::new(tape, binding, mode);
        ctx.bypass_residual = opts.bypass_residual;
        let logits = self.logits(&mut ctx, x)?;
        let probs = nn::softmax_channels(ctx.tape, &logits)?;
        Ok(ForwardPass {
            probs,
            bn_updates: ctx.bn_updates,
            trace: ctx.trace,
        })
    }

    fn logits(&self, ctx: &mut Ctx<'_>, x: &Tensor) -> Result<Tensor> {
        let block = |ctx: &mut Ctx<'_>, b: &Block, stage: Stage, h: &Tensor| -> Result<Tensor> {
            let y = b.forward(ctx, h)?;
            let s = y.shape();
            ctx.trace.push(TraceEvent::Block {
                stage,
                out_channels: s.c,
                height: s.h,
                width: s.w,
            });
            Ok(y)
        };
        match &self.net {
            Network::UNet {
                enc,
                bottleneck,
                ups,
                dec,
                head,
            } => {
                let mut h = x.clone();
                let mut skips = Vec::with_capacity(enc.len());
                for (lvl, b) in enc.iter().enumerate() {
                    h = block(ctx, b, Stage::Encoder(lvl), &h)?;
                    skips.push(h.clone());
                    h = nn::max_pool2d(ctx.tape, &h)?.0;
                    ctx.trace.push(TraceEvent::Pool { level: lvl });
                }
                h = block(ctx, bottleneck, Stage::Bottleneck, &h)?;
                for lvl in (0..enc.len()).rev() {
                    let up = ups[lvl].forward(ctx, &h)?;
                    h = nn::concat_channels(ctx.tape, &skips[lvl], &up)?;
                    ctx.trace.push(TraceEvent::Concat { level: lvl });
                    h = block(ctx, &dec[lvl], Stage::Decoder(lvl), &h)?;
                }
                head.forward(ctx, &h)
            }
            Network::SegNet { enc, dec, head } => {
                let mut h = x.clone();
                let mut pools = Vec::with_capacity(enc.len());
                for (lvl, b) in enc.iter().enumerate() {
                    h = block(ctx, b, Stage::Encoder(lvl), &h)?;
                    let before = h.shape();
                    let (p, idx) = nn::max_pool2d(ctx.tape, &h)?;
                    ctx.trace.push(TraceEvent::Pool { level: lvl });
                    pools.push((idx, before));
                    h = p;
                }
                for lvl in (0..enc.len()).rev() {
                    let (idx, shape) = &pools[lvl];
                    h = nn::max_unpool2d(ctx.tape, &h, idx, *shape)?;
                    ctx.trace.push(TraceEvent::Unpool { level: lvl });
                    h = block(ctx, &dec[lvl], Stage::Decoder(lvl), &h)?;
                }
                head.forward(ctx, &h)
            }
            Network::Fcn {
                stages,
                scores,
                fuse,
                upsample,
            } => {
                let mut h = x.clone();
                let mut pooled = Vec::with_capacity(stages.len());
                for (s, b) in stages.iter().enumerate() {
                    h = block(ctx, b, Stage::Encoder(s), &h)?;
                    h = nn::max_pool2d(ctx.tape, &h)?.0;
                    ctx.trace.push(TraceEvent::Pool { level: s });
                    pooled.push(h.clone());
                }
                let mut score = scores[0].forward(ctx, &pooled[FCN_STAGES - 1])?;
                ctx.trace.push(TraceEvent::Score { level: FCN_STAGES - 1 });
                for j in 1..scores.len() {
                    let up = fuse[j - 1].forward(ctx, &score)?;
                    let level = FCN_STAGES - 1 - j;
                    let skip = scores[j].forward(ctx, &pooled[level])?;
                    ctx.trace.push(TraceEvent::Score { level });
                    score = ops::add(ctx.tape, &up, &skip)?;
                }
                upsample.forward(ctx, &score)
            }
        }
    }

    /// Eval-mode probabilities without gradient tracking.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        Ok(self.forward(&mut tape, &binding, x, Mode::Eval)?.probs)
    }

    pub fn predict_labels(&self, x: &Tensor) -> Result<LabelMap> {
        nn::argmax_channels(&self.predict(x)?)
    }

    /// Output shape for an input of shape `x`.
    pub fn output_shape(&self, x: Shape) -> Shape {
        Shape::new(x.n, self.spec.num_classes, x.h, x.w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::FcnStride;

    fn tiny(family: Family, depth: usize, base: usize, size: usize) -> ArchitectureSpec {
        ArchitectureSpec::new(family)
            .with_depth(depth)
            .with_base_filters(base)
            .with_input_size(size)
    }

    fn all_tiny() -> Vec<ArchitectureSpec> {
        Family::NAMES
            .iter()
            .map(|n| {
                let f: Family = n.parse().unwrap();
                let depth = if matches!(f, Family::Fcn(_)) { 5 } else { 2 };
                tiny(f, depth, 2, 32)
            })
            .collect()
    }

    fn input(spec: &ArchitectureSpec, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = spec.input_size;
        Tensor::uniform(Shape::new(n, spec.in_channels, s, s), 0.0, 1.0, &mut rng)
    }

    fn assert_simplex(p: &Tensor) {
        let s = p.shape();
        for n in 0..s.n {
            for y in 0..s.h {
                for x in 0..s.w {
                    let sum: f64 = (0..s.c).map(|c| p.at(n, c, y, x)).sum();
                    assert!((sum - 1.0).abs() < 1e-9, "{sum}");
                }
            }
        }
    }

    #[test]
    fn parameter_counts_match_formulas() {
        for spec in all_tiny() {
            let m = Model::build(&spec, 1).unwrap();
            assert_eq!(m.parameter_count(), spec.expected_parameter_count(), "{}", spec.family);
        }
        for name in Family::NAMES {
            let spec = ArchitectureSpec::new(name.parse().unwrap());
            let m = Model::skeleton(&spec).unwrap();
            assert_eq!(m.parameter_count(), spec.expected_parameter_count(), "{name}");
        }
    }

    #[test]
    fn output_is_simplex_of_input_size() {
        for spec in all_tiny() {
            let m = Model::build(&spec, 2).unwrap();
            let p = m.predict(&input(&spec, 2, 3)).unwrap();
            assert_eq!(p.shape(), Shape::new(2, 5, 32, 32), "{}", spec.family);
            assert_simplex(&p);
        }
        let spec = tiny(Family::Unet, 2, 4, 16).with_classes(3);
        let p = Model::build(&spec, 0).unwrap().predict(&input(&spec, 1, 0)).unwrap();
        assert_eq!(p.shape(), Shape::new(1, 3, 16, 16));
        assert_simplex(&p);
    }

    #[test]
    fn batch_independent_in_eval() {
        for spec in all_tiny() {
            let m = Model::build(&spec, 4).unwrap();
            let x = input(&spec, 2, 5);
            let both = m.predict(&x).unwrap();
            let one = m.predict(&x.slice_batch(0..1).unwrap()).unwrap();
            let two = m.predict(&x.slice_batch(1..2).unwrap()).unwrap();
            let joined = Tensor::stack_batch(&[one, two]).unwrap();
            assert!(both.max_abs_diff(&joined) < 1e-10, "{}", spec.family);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = tiny(Family::Unet, 2, 2, 32);
        let m = Model::build(&spec, 0).unwrap();
        assert!(m.predict(&Tensor::zeros(Shape::new(1, 3, 30, 32))).is_err());
        assert!(m.predict(&Tensor::zeros(Shape::new(1, 1, 32, 32))).is_err());
        assert!(build_segnet(&spec, 0).is_err());
        assert!(build_unet(&spec, 0).is_ok());
    }

    #[test]
    fn segnet_unpools_mirror_pools() {
        let spec = tiny(Family::Segnet, 3, 2, 32);
        let m = Model::build(&spec, 0).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let pass = m.forward(&mut tape, &b, &input(&spec, 1, 1), Mode::Eval).unwrap();
        let pools: Vec<usize> = pass
            .trace
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Pool { level } => Some(*level),
                _ => None,
            })
            .collect();
        let unpools: Vec<usize> = pass
            .trace
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Unpool { level } => Some(*level),
                _ => None,
            })
            .collect();
        assert_eq!(pools, vec![0, 1, 2]);
        assert_eq!(unpools, vec![2, 1, 0]);
        assert!(!pass.trace.iter().any(|e| matches!(e, TraceEvent::Concat { .. })));
    }

    #[test]
    fn fcn_score_levels() {
        for (stride, levels) in [(FcnStride::S32, vec![4]), (FcnStride::S16, vec![4, 3]), (FcnStride::S8, vec![4, 3, 2])] {
            let spec = tiny(Family::Fcn(stride), 5, 2, 32);
            let m = Model::build(&spec, 0).unwrap();
            let mut tape = Tape::new();
            let b = m.bind(&mut tape, false);
            let pass = m.forward(&mut tape, &b, &input(&spec, 1, 1), Mode::Eval).unwrap();
            let seen: Vec<usize> = pass
                .trace
                .iter()
                .filter_map(|e| match e {
                    TraceEvent::Score { level } => Some(*level),
                    _ => None,
                })
                .collect();
            assert_eq!(seen, levels);
        }
    }

    #[test]
    fn unet_ladder_in_trace() {
        let spec = tiny(Family::Unet, 3, 4, 32);
        let m = Model::build(&spec, 0).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let pass = m.forward(&mut tape, &b, &input(&spec, 1, 1), Mode::Eval).unwrap();
        let blocks: Vec<(usize, usize)> = pass
            .trace
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Block { out_channels, height, .. } => Some((*out_channels, *height)),
                _ => None,
            })
            .collect();
        assert_eq!(
            blocks,
            vec![(4, 32), (8, 16), (16, 8), (32, 4), (16, 8), (8, 16), (4, 32)]
        );
    }

    #[test]
    fn zeroed_residual_paths_bypass() {
        let spec = tiny(Family::Resunet, 2, 2, 16);
        let mut m = Model::build(&spec, 9).unwrap();
        m.zero_residual_paths();
        let x = input(&spec, 2, 2);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let full = m.forward(&mut tape, &b, &x, Mode::Eval).unwrap().probs;
        let opts = ForwardOptions { bypass_residual: true };
        let short = m.forward_with(&mut tape, &b, &x, Mode::Eval, opts).unwrap().probs;
        assert!(full.bit_eq(&short));
    }

    #[test]
    fn train_mode_reports_bn_updates() {
        let spec = tiny(Family::Resunet, 1, 2, 8);
        let m = Model::build(&spec, 0).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, true);
        let pass = m.forward(&mut tape, &b, &input(&spec, 2, 0), Mode::Train).unwrap();
        // 3 residual blocks, 2 BNs each, mean + var
        assert_eq!(pass.bn_updates.len(), 12);
        let mut m2 = m.clone();
        m2.apply_bn_updates(pass.bn_updates).unwrap();
    }
}
