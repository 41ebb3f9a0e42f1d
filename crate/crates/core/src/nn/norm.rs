use crate::error::{Result, SegError};
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch normalization parameters and running statistics.
///
/// All four tensors have shape `(1, c, 1, 1)`. Running statistics follow
/// `running = momentum·running + (1 − momentum)·batch`.
#[derive(Clone, Debug)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f64,
    pub momentum: f64,
    pub mode: Mode,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        BatchNormState {
            gamma: Tensor::ones(s),
            beta: Tensor::zeros(s),
            running_mean: Tensor::zeros(s),
            running_var: Tensor::ones(s),
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
            mode: Mode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c
    }
}

/// Sums over `(n, h, w)` per channel.
fn channel_sums(data: &[f64], s: Shape, f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
    let plane = s.plane();
    let mut acc = vec![0.0; s.c];
    for (i, chunk) in data.chunks(plane).enumerate() {
        let c = i % s.c;
        let base = i * plane;
        acc[c] += chunk
            .iter()
            .enumerate()
            .map(|(k, &v)| f(base + k, v))
            .sum::<f64>();
    }
    acc
}

pub fn batch_norm2d(tape: &mut Tape, x: &Tensor, st: &mut BatchNormState) -> Result<Tensor> {
    let s = x.shape();
    let cs = Shape::new(1, s.c, 1, 1);
    for t in [&st.gamma, &st.beta, &st.running_mean, &st.running_var] {
        if t.shape() != cs {
            return Err(SegError::ShapeMismatch {
                op: "batch_norm2d (input vs state)",
                left: s,
                right: t.shape(),
            });
        }
    }
    let m = s.n * s.plane();
    let eps = st.epsilon;
    let (mean, var) = match st.mode {
        Mode::Train => {
            if m <= 1 {
                return Err(SegError::InvalidShape {
                    op: "batch_norm2d",
                    reason: format!(
                        "train mode needs more than one value per channel, got {s}"
                    ),
                });
            }
            let mean: Vec<f64> = channel_sums(x.data(), s, |_, v| v)
                .into_iter()
                .map(|v| v / m as f64)
                .collect();
            let var: Vec<f64> = channel_sums(x.data(), s, |i, v| {
                let d = v - mean[(i / s.plane()) % s.c];
                d * d
            })
            .into_iter()
            .map(|v| v / m as f64)
            .collect();
            let mo = st.momentum;
            let unbias = m as f64 / (m as f64 - 1.0);
            st.running_mean = Tensor::from_parts(
                cs,
                st.running_mean
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(r, b)| mo * r + (1.0 - mo) * b)
                    .collect(),
            );
            st.running_var = Tensor::from_parts(
                cs,
                st.running_var
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(r, b)| mo * r + (1.0 - mo) * b * unbias)
                    .collect(),
            );
            (mean, var)
        }
        Mode::Eval => (st.running_mean.to_vec(), st.running_var.to_vec()),
    };
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let plane = s.plane();
    let gamma = st.gamma.data();
    let beta = st.beta.data();
    let mut xhat = Vec::with_capacity(s.numel());
    let mut y = Vec::with_capacity(s.numel());
    for (i, chunk) in x.data().chunks(plane).enumerate() {
        let c = i % s.c;
        for &v in chunk {
            let h = (v - mean[c]) * inv[c];
            xhat.push(h);
            y.push(gamma[c] * h + beta[c]);
        }
    }
    let out = Tensor::from_parts(s, y);
    let gamma_t = st.gamma.detach();
    let train = st.mode == Mode::Train;
    tape.record("batch_norm2d", out, &[x, &st.gamma, &st.beta], move |g, needs| {
        let dy = g.data();
        let gamma = gamma_t.data();
        let dgamma = channel_sums(dy, s, |i, v| v * xhat[i]);
        let dbeta = channel_sums(dy, s, |_, v| v);
        let dx = needs[0].then(|| {
            let mf = m as f64;
            dy.iter()
                .enumerate()
                .map(|(i, &d)| {
                    let c = (i / plane) % s.c;
                    if train {
                        gamma[c] * inv[c] / mf * (mf * d - dbeta[c] - xhat[i] * dgamma[c])
                    } else {
                        gamma[c] * inv[c] * d
                    }
                })
                .collect()
        });
        vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
    })
}
