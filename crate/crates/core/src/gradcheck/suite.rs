//! Named gradient-check cases for every differentiable op and each family.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check_inputs, GradCheckReport};
use crate::arch::{build_residual_block, ArchitectureSpec, Binding, Family, Model, ParamKind, ParamStore};
use crate::error::{Result, SegError};
use crate::labels::LabelMap;
use crate::loss::dice_loss;
use crate::nn::{self, BatchNormState, ConvParams, Mode, Padding};
use crate::ops;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};
use crate::train::one_hot;

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

/// Points whose kink margin is below this are resampled.
const KINK_FLOOR: f64 = 10.0 * GRADCHECK_EPS;
const MAX_RESAMPLES: u64 = 25;
/// Entries perturbed per input tensor for whole-network cases.
const NETWORK_SAMPLE: usize = 6;

pub const OP_CASES: [&str; 12] = [
    "conv2d",
    "conv2d_strided",
    "conv2d_transpose",
    "max_pool2d",
    "max_unpool2d",
    "batch_norm2d",
    "batch_norm2d_train",
    "softmax_channels",
    "resize_bilinear",
    "concat_channels",
    "dice_loss",
    "residual_block",
];

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_relative_error < GRADCHECK_THRESHOLD
    }
}

/// `Σ r ⊙ y` for a fixed random `r`, so every output entry matters.
fn weighted_sum(tape: &mut Tape, y: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let r = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
    let p = ops::mul(tape, y, &r)?;
    ops::sum_all(tape, &p)
}

fn randn(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Reruns `attempt` with fresh seeds until its point is clear of kinks.
fn away_from_kinks(seed: u64, mut attempt: impl FnMut(u64) -> Result<GradCheckReport>) -> Result<GradCheckReport> {
    let mut last = None;
    for k in 0..MAX_RESAMPLES {
        let r = attempt(seed.wrapping_add(k * 0x9e37_79b9))?;
        if r.kink_margin >= KINK_FLOOR {
            return Ok(r);
        }
        last = Some(r);
    }
    Err(SegError::Undefined(format!(
        "no kink-free point in {MAX_RESAMPLES} samples (last margin {:e})",
        last.map_or(0.0, |r| r.kink_margin)
    )))
}

fn op_report(name: &str, seed: u64) -> Result<GradCheckReport> {
    let eps = GRADCHECK_EPS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match name {
        "conv2d" | "conv2d_strided" => {
            let (stride, pad) = if name == "conv2d" { (1, Padding::Same) } else { (2, Padding::Valid) };
            let inputs = [
                randn(Shape::new(2, 3, 5, 5), &mut rng),
                randn(Shape::new(4, 3, 3, 3), &mut rng),
                randn(Shape::new(1, 4, 1, 1), &mut rng),
            ];
            grad_check_inputs(
                |t, xs| {
                    let p = ConvParams::new(xs[1].clone(), xs[2].clone(), stride, pad)?;
                    let y = nn::conv2d(t, &xs[0], &p)?;
                    weighted_sum(t, &y, seed)
                },
                &inputs,
                eps,
                None,
            )
        }
        "conv2d_transpose" => {
            let inputs = [
                randn(Shape::new(2, 3, 3, 3), &mut rng),
                randn(Shape::new(3, 2, 2, 2), &mut rng),
                randn(Shape::new(1, 2, 1, 1), &mut rng),
            ];
            grad_check_inputs(
                |t, xs| {
                    let p = ConvParams::transposed(xs[1].clone(), xs[2].clone(), 2)?;
                    let y = nn::conv2d_transpose(t, &xs[0], &p, 2)?;
                    weighted_sum(t, &y, seed)
                },
                &inputs,
                eps,
                None,
            )
        }
        "max_pool2d" | "max_unpool2d" => away_from_kinks(seed, |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let x = randn(Shape::new(2, 2, 4, 6), &mut rng);
            let unpool = name == "max_unpool2d";
            grad_check_inputs(
                |t, xs| {
                    let (y, idx) = nn::max_pool2d(t, &xs[0])?;
                    let y = if unpool {
                        nn::max_unpool2d(t, &y, &idx, xs[0].shape())?
                    } else {
                        y
                    };
                    weighted_sum(t, &y, s)
                },
                std::slice::from_ref(&x),
                eps,
                None,
            )
        }),
        "batch_norm2d" | "batch_norm2d_train" => {
            let mode = if name == "batch_norm2d" { Mode::Eval } else { Mode::Train };
            let c = 3;
            let inputs = [
                randn(Shape::new(2, c, 3, 3), &mut rng),
                Tensor::uniform(Shape::new(1, c, 1, 1), 0.5, 1.5, &mut rng),
                randn(Shape::new(1, c, 1, 1), &mut rng),
            ];
            let running_mean = randn(Shape::new(1, c, 1, 1), &mut rng);
            let running_var = Tensor::uniform(Shape::new(1, c, 1, 1), 0.5, 2.0, &mut rng);
            grad_check_inputs(
                |t, xs| {
                    let mut st = BatchNormState {
                        gamma: xs[1].clone(),
                        beta: xs[2].clone(),
                        running_mean: running_mean.clone(),
                        running_var: running_var.clone(),
                        mode,
                        ..BatchNormState::new(c)
                    };
                    let y = nn::batch_norm2d(t, &xs[0], &mut st)?;
                    weighted_sum(t, &y, seed)
                },
                &inputs,
                eps,
                None,
            )
        }
        "softmax_channels" => {
            let x = randn(Shape::new(2, 4, 3, 3), &mut rng);
            grad_check_inputs(
                |t, xs| {
                    let y = nn::softmax_channels(t, &xs[0])?;
                    weighted_sum(t, &y, seed)
                },
                std::slice::from_ref(&x),
                eps,
                None,
            )
        }
        "resize_bilinear" => {
            let x = randn(Shape::new(1, 2, 3, 4), &mut rng);
            grad_check_inputs(
                |t, xs| {
                    let y = nn::resize_bilinear(t, &xs[0], 5, 7)?;
                    weighted_sum(t, &y, seed)
                },
                std::slice::from_ref(&x),
                eps,
                None,
            )
        }
        "concat_channels" => {
            let inputs = [randn(Shape::new(2, 2, 3, 3), &mut rng), randn(Shape::new(2, 3, 3, 3), &mut rng)];
            grad_check_inputs(
                |t, xs| {
                    let y = nn::concat_channels(t, &xs[0], &xs[1])?;
                    weighted_sum(t, &y, seed)
                },
                &inputs,
                eps,
                None,
            )
        }
        "dice_loss" => {
            // Probabilities from a softmax; truth one-hot.
            let logits = randn(Shape::new(2, 3, 2, 2), &mut rng);
            let probs = nn::softmax_channels(&mut Tape::new(), &logits)?;
            let labels = LabelMap::new(2, 2, 2, (0..8).map(|_| rng.random_range(0..3u8)).collect())?;
            let truth = one_hot(&labels, 3)?;
            grad_check_inputs(|t, xs| dice_loss(t, &xs[0], &xs[1]), &[probs, truth], eps, None)
        }
        "residual_block" => away_from_kinks(seed, |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let block = build_residual_block(2, 3, &mut rng);
            let x = randn(Shape::new(2, 2, 4, 4), &mut rng);
            let (names, mut inputs) = trainable_inputs(block.params());
            inputs.insert(0, x);
            grad_check_inputs(
                |t, xs| {
                    let b = rebind(block.params(), &names, &xs[1..]);
                    let out = block.forward_bound(t, &b, &xs[0], Mode::Eval)?;
                    weighted_sum(t, &out.output, s)
                },
                &inputs,
                eps,
                None,
            )
        }),
        other => Err(SegError::InvalidArgument(format!(
            "unknown gradcheck op `{other}` (valid: {})",
            OP_CASES.join(", ")
        ))),
    }
}

fn trainable_inputs(params: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    params
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(n, p)| (n.clone(), p.value.clone()))
        .unzip()
}

/// Binding with `names` taken from `values` and everything else from `params`.
fn rebind(params: &ParamStore, names: &[String], values: &[Tensor]) -> Binding {
    let mut b: Binding = params.iter().map(|(n, p)| (n.clone(), p.value.detach())).collect();
    for (n, v) in names.iter().zip(values) {
        b.insert(n.clone(), v.clone());
    }
    b
}

/// Gradient check of a single op or block by case name.
pub fn check_op(name: &str, seed: u64) -> Result<GradCheckReport> {
    op_report(name, seed)
}

/// Smallest instance of `family`: depth 1 and base 2 (FCN keeps its five
/// stages, so it runs at 32² instead of 8²).
fn smallest_spec(family: Family) -> ArchitectureSpec {
    let spec = ArchitectureSpec::new(family).with_base_filters(2).with_classes(3);
    match family {
        Family::Fcn(_) => spec.with_input_size(32),
        _ => spec.with_depth(1).with_input_size(8),
    }
}

/// Eval-mode gradient check of a whole network with respect to its input
/// and a strided sample of every parameter tensor.
pub fn check_arch(family: Family, seed: u64) -> Result<GradCheckReport> {
    let spec = smallest_spec(family);
    away_from_kinks(seed, |s| {
        let model = Model::build(&spec, s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xa5a5);
        let size = spec.input_size;
        let x = Tensor::uniform(Shape::new(1, spec.in_channels, size, size), 0.0, 1.0, &mut rng);
        let (names, mut inputs) = trainable_inputs(model.params());
        inputs.insert(0, x);
        grad_check_inputs(
            |t, xs| {
                let b = rebind(model.params(), &names, &xs[1..]);
                let pass = model.forward(t, &b, &xs[0], Mode::Eval)?;
                weighted_sum(t, &pass.probs, s)
            },
            &inputs,
            GRADCHECK_EPS,
            Some(NETWORK_SAMPLE),
        )
    })
}

/// Every op case followed by every architecture family.
pub fn run_suite(seed: u64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for name in OP_CASES {
        out.push(CaseResult {
            name: name.to_string(),
            report: check_op(name, seed)?,
        });
    }
    for name in Family::NAMES {
        out.push(CaseResult {
            name: name.to_string(),
            report: check_arch(name.parse()?, seed)?,
        });
    }
    Ok(out)
}
