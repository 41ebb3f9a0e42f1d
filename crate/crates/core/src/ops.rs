//! Elementwise arithmetic and reductions.

use crate::error::{Result, SegError};
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Scale(f64),
}

impl ElementwiseOp {
    fn is_binary(self) -> bool {
        matches!(self, ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul)
    }
}

pub fn elementwise(
    tape: &mut Tape,
    kind: ElementwiseOp,
    a: &Tensor,
    b: Option<&Tensor>,
) -> Result<Tensor> {
    if kind.is_binary() {
        let b = b.ok_or_else(|| {
            SegError::InvalidArgument(format!("{kind:?} needs two operands"))
        })?;
        binary(tape, kind, a, b)
    } else {
        if b.is_some() {
            return Err(SegError::InvalidArgument(format!(
                "{kind:?} takes one operand"
            )));
        }
        unary(tape, kind, a)
    }
}

fn binary(tape: &mut Tape, kind: ElementwiseOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(SegError::ShapeMismatch {
            op: "elementwise",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let f: fn(f64, f64) -> f64 = match kind {
        ElementwiseOp::Add => |x, y| x + y,
        ElementwiseOp::Sub => |x, y| x - y,
        ElementwiseOp::Mul => |x, y| x * y,
        _ => unreachable!(),
    };
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    let out = Tensor::from_parts(a.shape(), data);
    let (sa, sb) = (a.detach(), b.detach());
    tape.record("elementwise", out, &[a, b], move |g, needs| {
        let g = g.data();
        match kind {
            ElementwiseOp::Add => vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.to_vec()),
            ],
            ElementwiseOp::Sub => vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|v| -v).collect()),
            ],
            ElementwiseOp::Mul => vec![
                needs[0].then(|| g.iter().zip(sb.data()).map(|(g, y)| g * y).collect()),
                needs[1].then(|| g.iter().zip(sa.data()).map(|(g, x)| g * x).collect()),
            ],
            _ => unreachable!(),
        }
    })
}

fn unary(tape: &mut Tape, kind: ElementwiseOp, a: &Tensor) -> Result<Tensor> {
    match kind {
        ElementwiseOp::Relu => {
            let margin = a.data().iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
            tape.note_kink(margin);
            let out = a.map(|v| v.max(0.0));
            let sa = a.detach();
            tape.record("relu", out, &[a], move |g, _| {
                let dx = g
                    .data()
                    .iter()
                    .zip(sa.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![Some(dx)]
            })
        }
        ElementwiseOp::Scale(k) => {
            let out = a.map(|v| v * k);
            tape.record("scale", out, &[a], move |g, _| {
                vec![Some(g.data().iter().map(|v| v * k).collect())]
            })
        }
        _ => unreachable!(),
    }
}

pub fn add(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(tape, ElementwiseOp::Add, a, Some(b))
}

pub fn sub(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(tape, ElementwiseOp::Sub, a, Some(b))
}

pub fn mul(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(tape, ElementwiseOp::Mul, a, Some(b))
}

pub fn relu(tape: &mut Tape, a: &Tensor) -> Result<Tensor> {
    elementwise(tape, ElementwiseOp::Relu, a, None)
}

pub fn scale(tape: &mut Tape, a: &Tensor, k: f64) -> Result<Tensor> {
    elementwise(tape, ElementwiseOp::Scale(k), a, None)
}

/// Subset of the four NCHW axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Axes([bool; 4]);

impl Axes {
    pub const fn all() -> Self {
        Axes([true; 4])
    }

    pub const fn none() -> Self {
        Axes([false; 4])
    }

    pub fn of(axes: &[usize]) -> Result<Self> {
        let mut set = [false; 4];
        for &a in axes {
            if a >= 4 {
                return Err(SegError::InvalidArgument(format!(
                    "axis {a} is invalid for a rank-4 tensor"
                )));
            }
            set[a] = true;
        }
        Ok(Axes(set))
    }

    pub fn contains(&self, axis: usize) -> bool {
        self.0.get(axis).copied().unwrap_or(false)
    }

    fn reduce(&self, s: Shape) -> Shape {
        let mut d = s.dims();
        for (i, dim) in d.iter_mut().enumerate() {
            if self.0[i] {
                *dim = 1;
            }
        }
        Shape::from_dims(d)
    }
}

/// Maps every input offset to its reduced output offset.
fn reduced_offsets(s: Shape, out: Shape, axes: Axes) -> impl Iterator<Item = usize> {
    let keep = axes.0.map(|r| usize::from(!r));
    (0..s.n).flat_map(move |n| {
        (0..s.c).flat_map(move |c| {
            (0..s.h).flat_map(move |h| {
                (0..s.w).map(move |w| {
                    out.offset(n * keep[0], c * keep[1], h * keep[2], w * keep[3])
                })
            })
        })
    })
}

pub fn reduce_sum(tape: &mut Tape, a: &Tensor, axes: Axes) -> Result<Tensor> {
    let s = a.shape();
    let out_shape = axes.reduce(s);
    let mut out = vec![0.0; out_shape.numel()];
    for (o, &v) in reduced_offsets(s, out_shape, axes).zip(a.data()) {
        out[o] += v;
    }
    let out = Tensor::from_parts(out_shape, out);
    tape.record("reduce_sum", out, &[a], move |g, _| {
        let g = g.data();
        vec![Some(
            reduced_offsets(s, out_shape, axes).map(|o| g[o]).collect(),
        )]
    })
}

/// Sum over all axes as a `(1,1,1,1)` tensor.
pub fn sum_all(tape: &mut Tape, a: &Tensor) -> Result<Tensor> {
    reduce_sum(tape, a, Axes::all())
}
