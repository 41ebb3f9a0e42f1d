//! 2×2 max pooling with argmax capture, and index-driven unpooling.

use crate::error::{Result, SegError};
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

/// Argmax positions recorded by [`max_pool2d`].
///
/// One entry per pooled output element: the row-major offset, within the
/// input `h × w` plane, of the selected maximum.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    input: Shape,
    output: Shape,
    offsets: Vec<usize>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        self.output
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// `(row, col)` in the input plane for pooled element `(n, c, i, j)`.
    pub fn position(&self, n: usize, c: usize, i: usize, j: usize) -> (usize, usize) {
        let off = self.offsets[self.output.offset(n, c, i, j)];
        (off / self.input.w, off % self.input.w)
    }

    /// Every offset lies inside its 2×2 window.
    pub fn is_consistent(&self) -> bool {
        let o = self.output;
        if self.offsets.len() != o.numel()
            || self.input != Shape::new(o.n, o.c, o.h * 2, o.w * 2)
        {
            return false;
        }
        self.offsets.iter().enumerate().all(|(k, &off)| {
            let j = k % o.w;
            let i = (k / o.w) % o.h;
            let (r, c) = (off / self.input.w, off % self.input.w);
            off < self.input.plane() && r / 2 == i && c / 2 == j
        })
    }
}

/// Non-overlapping 2×2 max pooling. Ties resolve to the lowest offset.
pub fn max_pool2d(tape: &mut Tape, x: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) || s.h == 0 || s.w == 0 {
        return Err(SegError::InvalidShape {
            op: "max_pool2d",
            reason: format!("spatial dims must be even and non-zero, got {s}"),
        });
    }
    let out_shape = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut values = Vec::with_capacity(out_shape.numel());
    let mut offsets = Vec::with_capacity(out_shape.numel());
    let mut margin = f64::INFINITY;
    let data = x.data();
    for plane in data.chunks(s.plane()) {
        for i in 0..out_shape.h {
            for j in 0..out_shape.w {
                let mut best = (f64::NEG_INFINITY, 0);
                let mut second = f64::NEG_INFINITY;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let off = (2 * i + dy) * s.w + 2 * j + dx;
                    let v = plane[off];
                    if v > best.0 {
                        second = best.0;
                        best = (v, off);
                    } else if v > second {
                        second = v;
                    }
                }
                // Ties at exactly zero are inactive ReLUs: locally constant.
                if !(best.0 == 0.0 && second == 0.0) {
                    margin = margin.min(best.0 - second);
                }
                values.push(best.0);
                offsets.push(best.1);
            }
        }
    }
    tape.note_kink(margin);
    let idx = PoolIndices {
        input: s,
        output: out_shape,
        offsets,
    };
    let out = Tensor::from_parts(out_shape, values);
    let saved = idx.clone();
    let y = tape.record("max_pool2d", out, &[x], move |g, _| {
        vec![Some(scatter(&saved, g.data()))]
    })?;
    Ok((y, idx))
}

fn scatter(idx: &PoolIndices, values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; idx.input.numel()];
    let (ip, op) = (idx.input.plane(), idx.output.plane());
    for (k, (&off, &v)) in idx.offsets.iter().zip(values).enumerate() {
        out[(k / op) * ip + off] += v;
    }
    out
}

fn gather(idx: &PoolIndices, full: &[f64]) -> Vec<f64> {
    let (ip, op) = (idx.input.plane(), idx.output.plane());
    idx.offsets
        .iter()
        .enumerate()
        .map(|(k, &off)| full[(k / op) * ip + off])
        .collect()
}

/// Places each value of `y` at its recorded argmax position inside a zero
/// tensor of shape `out_shape`.
pub fn max_unpool2d(tape: &mut Tape, y: &Tensor, idx: &PoolIndices, out_shape: Shape) -> Result<Tensor> {
    if idx.output != y.shape() {
        return Err(SegError::ShapeMismatch {
            op: "max_unpool2d (values vs indices)",
            left: y.shape(),
            right: idx.output,
        });
    }
    if idx.input != out_shape {
        return Err(SegError::ShapeMismatch {
            op: "max_unpool2d (indices vs output shape)",
            left: idx.input,
            right: out_shape,
        });
    }
    let out = Tensor::from_parts(out_shape, scatter(idx, y.data()));
    let saved = idx.clone();
    tape.record("max_unpool2d", out, &[y], move |g, _| {
        vec![Some(gather(&saved, g.data()))]
    })
}
