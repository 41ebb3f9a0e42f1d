//! Mini-batch Dice training with SGD-momentum or Adam.

use std::collections::HashMap;
use std::fmt;
use std::io::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{save_checkpoint, ArchitectureSpec, Binding, Model};
use crate::data::{resize_sample, Sample};
use crate::error::{Result, SegError};
use crate::labels::LabelMap;
use crate::loss::dice_loss;
use crate::metrics::ConfusionMatrix;
use crate::nn::Mode;
use crate::tape::{Gradients, Tape};
use crate::tensor::{Shape, Tensor};

/// `(n, classes, h, w)` indicator tensor of `labels`.
pub fn one_hot(labels: &LabelMap, classes: usize) -> Result<Tensor> {
    labels.validate(classes)?;
    let (n, h, w) = labels.dims();
    let plane = h * w;
    let mut data = vec![0.0; n * classes * plane];
    for b in 0..n {
        for i in 0..plane {
            let l = labels.labels()[b * plane + i] as usize;
            data[(b * classes + l) * plane + i] = 1.0;
        }
    }
    Tensor::new(Shape::new(n, classes, h, w), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    /// `v ← μv + g`, `p ← p − lr·v`.
    SgdMomentum,
    #[default]
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::SgdMomentum => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = SegError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(SegError::InvalidArgument(format!(
                "unknown optimizer `{other}` (valid: adam, sgd)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Momentum μ for SGD, β₁ for Adam.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    /// First (and for Adam second) moment per parameter name.
    buffers: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            buffers: HashMap::new(),
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::SgdMomentum,
            lr,
            beta1: momentum,
            beta2: 0.0,
            eps: 0.0,
            step: 0,
            buffers: HashMap::new(),
        }
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::adam(lr),
            OptimizerKind::SgdMomentum => Optimizer::sgd(lr, 0.9),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the step counter; call once per batch before [`Optimizer::update`].
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Returns the updated value of parameter `name`.
    pub fn update(&mut self, name: &str, param: &Tensor, grad: &Tensor) -> Result<Tensor> {
        if param.shape() != grad.shape() {
            return Err(SegError::ShapeMismatch {
                op: "optimizer_step",
                left: param.shape(),
                right: grad.shape(),
            });
        }
        let n = param.numel();
        let (m, v) = self
            .buffers
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let mut p = param.to_vec();
        let g = grad.data();
        match self.kind {
            OptimizerKind::SgdMomentum => {
                for i in 0..n {
                    m[i] = self.beta1 * m[i] + g[i];
                    p[i] -= self.lr * m[i];
                }
            }
            OptimizerKind::Adam => {
                let t = self.step.max(1) as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for i in 0..n {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
        Tensor::new(param.shape(), p)
    }

    /// One step over every trainable parameter of `model`.
    pub fn step_model(&mut self, model: &mut Model, binding: &Binding, grads: &Gradients) -> Result<()> {
        self.begin_step();
        let names: Vec<String> = model.trainable_names().map(str::to_string).collect();
        for name in names {
            let g = binding
                .get(&name)
                .and_then(|t| grads.get(t))
                .ok_or_else(|| SegError::MissingGradient(name.clone()))?;
            let p = &model.params()[&name].value;
            let next = self.update(&name, p, &g)?;
            model.set_param(&name, next)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub spec: ArchitectureSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Stop after this many steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Written at the end of every epoch.
    pub checkpoint: Option<PathBuf>,
    /// `step,epoch,loss` CSV, rewritten at the end of every epoch.
    pub loss_log: Option<PathBuf>,
    /// Progress line to stderr every this many steps; 0 is silent.
    pub log_interval: usize,
}

impl TrainConfig {
    pub fn new(spec: ArchitectureSpec) -> Self {
        TrainConfig {
            spec,
            epochs: 10,
            batch_size: 4,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            max_steps: None,
            checkpoint: None,
            loss_log: None,
            log_interval: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<LossRecord>,
}

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,epoch,loss\n");
    for r in history {
        s.push_str(&format!("{},{},{}\n", r.step, r.epoch, r.loss));
    }
    s
}

fn write_loss_log(path: &std::path::Path, history: &[LossRecord]) -> Result<()> {
    std::fs::write(path, loss_csv(history)).map_err(|e| SegError::io(path, e))
}

/// Loss and gradients for one batch; BN running statistics are updated in place.
pub fn train_step(
    model: &mut Model,
    opt: &mut Optimizer,
    images: &Tensor,
    masks: &LabelMap,
) -> Result<f64> {
    let truth = one_hot(masks, model.spec().num_classes)?;
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, true);
    let pass = model.forward(&mut tape, &binding, images, Mode::Train)?;
    let loss = dice_loss(&mut tape, &pass.probs, &truth)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(SegError::NonFinite(format!(
            "training loss {value} at optimizer step {}",
            opt.steps() + 1
        )));
    }
    let grads = tape.backward(&loss)?;
    opt.step_model(model, &binding, &grads)?;
    model.apply_bn_updates(pass.bn_updates)?;
    Ok(value)
}

fn prepare(config: &TrainConfig, samples: &[Sample]) -> Result<Vec<Sample>> {
    config.spec.validate()?;
    if samples.is_empty() {
        return Err(SegError::InvalidArgument("training set is empty".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(SegError::InvalidArgument("epochs and batch_size must be positive".into()));
    }
    if config.spec.in_channels != 3 {
        return Err(SegError::InvalidArgument(format!(
            "samples are RGB but the spec expects {} input channels",
            config.spec.in_channels
        )));
    }
    samples
        .iter()
        .map(|s| resize_sample(s, config.spec.input_size))
        .collect()
}

/// Trains a freshly built model. Data order, initialization and updates
/// all derive from `config.seed`.
pub fn train(config: &TrainConfig, samples: &[Sample]) -> Result<TrainOutcome> {
    let samples = prepare(config, samples)?;
    let mut model = Model::build(&config.spec, config.seed)?;
    if model.has_batch_norm() && config.batch_size < 2 {
        return Err(SegError::InvalidArgument(
            "batch_size must be at least 2 for architectures with batch norm".into(),
        ));
    }
    let mut opt = Optimizer::new(config.optimizer, config.lr);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_da7a);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::new();
    let limit = config.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(config.batch_size) {
            if history.len() >= limit {
                break 'epochs;
            }
            let images = Tensor::stack_batch(&chunk.iter().map(|&i| samples[i].image.clone()).collect::<Vec<_>>())?;
            let masks = LabelMap::stack(&chunk.iter().map(|&i| samples[i].mask.clone()).collect::<Vec<_>>())?;
            let loss = train_step(&mut model, &mut opt, &images, &masks)?;
            let step = history.len() + 1;
            history.push(LossRecord { step, epoch, loss });
            if config.log_interval > 0 && step % config.log_interval == 0 {
                let _ = writeln!(std::io::stderr(), "epoch {epoch} step {step} loss {loss:.6}");
            }
        }
        end_of_epoch(config, &model, &history)?;
    }
    if history.len() >= limit {
        end_of_epoch(config, &model, &history)?;
    }
    Ok(TrainOutcome { model, history })
}

fn end_of_epoch(config: &TrainConfig, model: &Model, history: &[LossRecord]) -> Result<()> {
    if let Some(p) = &config.checkpoint {
        save_checkpoint(model, p)?;
    }
    if let Some(p) = &config.loss_log {
        write_loss_log(p, history)?;
    }
    Ok(())
}

/// Confusion matrix of eval-mode predictions at the spec's input size.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<ConfusionMatrix> {
    let size = model.spec().input_size;
    let mut cm = ConfusionMatrix::new(model.spec().num_classes);
    for s in samples {
        let s = resize_sample(s, size)?;
        let pred = model.predict_labels(&s.image)?;
        cm.accumulate(&pred, &s.mask)?;
    }
    Ok(cm)
}
