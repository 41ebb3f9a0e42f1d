//! Dense rank-4 `f64` tensors in NCHW layout.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SegError};
use crate::tape::NodeId;

/// `(batch, channels, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one `h × w` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub const fn from_dims(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }

    pub const fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Immutable dense tensor. Cloning shares the buffer.
///
/// A tensor carries a [`NodeId`] when it was produced on a [`crate::Tape`]
/// from at least one gradient-tracked input; such tensors "require grad".
#[derive(Clone)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

/// Equal shapes and values; tape membership is ignored.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("node", &self.node)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(SegError::InvalidShape {
                op: "Tensor::new",
                reason: format!(
                    "shape {shape} needs {} elements, got {}",
                    shape.numel(),
                    data.len()
                ),
            });
        }
        Ok(Tensor::from_parts(shape, data))
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor::from_parts(shape, vec![value; shape.numel()])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(Shape::scalar(), vec![value])
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor::from_parts(shape, data)
    }

    /// Row-major `0, 1, 2, ...`.
    pub fn arange(shape: Shape) -> Self {
        Tensor::from_parts(shape, (0..shape.numel()).map(|i| i as f64).collect())
    }

    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::from_parts(shape, data)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| rng.random_range(lo..hi))
            .collect();
        Tensor::from_parts(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.offset(n, c, h, w)]
    }

    /// Value of a `(1,1,1,1)` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, detached from any tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape,
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub(crate) fn with_node(mut self, node: NodeId) -> Self {
        self.node = Some(node);
        self
    }

    pub fn reshape(&self, shape: Shape) -> Result<Tensor> {
        if shape.numel() != self.numel() {
            return Err(SegError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
            node: None,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Copy of channels `range` (not differentiable).
    pub fn slice_channels(&self, range: Range<usize>) -> Result<Tensor> {
        let s = self.shape;
        if range.start > range.end || range.end > s.c {
            return Err(SegError::InvalidArgument(format!(
                "channel range {range:?} out of bounds for {s}"
            )));
        }
        let out_shape = Shape::new(s.n, range.len(), s.h, s.w);
        let plane = s.plane();
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s.n {
            let start = s.offset(n, range.start, 0, 0);
            data.extend_from_slice(&self.data[start..start + range.len() * plane]);
        }
        Ok(Tensor::from_parts(out_shape, data))
    }

    /// Copy of batch items `range` (not differentiable).
    pub fn slice_batch(&self, range: Range<usize>) -> Result<Tensor> {
        let s = self.shape;
        if range.start > range.end || range.end > s.n {
            return Err(SegError::InvalidArgument(format!(
                "batch range {range:?} out of bounds for {s}"
            )));
        }
        let item = s.c * s.plane();
        let data = self.data[range.start * item..range.end * item].to_vec();
        Ok(Tensor::from_parts(
            Shape::new(range.len(), s.c, s.h, s.w),
            data,
        ))
    }

    /// Stacks tensors along the batch axis (not differentiable).
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| SegError::InvalidArgument("cannot stack zero tensors".into()))?
            .shape;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(SegError::ShapeMismatch {
                    op: "stack_batch",
                    left: first,
                    right: s,
                });
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor::from_parts(
            Shape::new(n, first.c, first.h, first.w),
            data,
        ))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
