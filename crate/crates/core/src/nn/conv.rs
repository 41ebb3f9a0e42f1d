//! 2-D convolution and its adjoint (transposed convolution).
//!
//! Both are lowered to GEMM over an im2col buffer. The buffer is built one
//! band of output rows at a time so its size stays bounded for large planes.

use crate::error::{Result, SegError};
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that `out = ceil(in / stride)`.
    Same,
    /// No padding.
    Valid,
}

/// Weights of a convolution layer.
///
/// `weight` has shape `(out_c, in_c, kh, kw)` and `bias` shape `(1, out_c, 1, 1)`.
/// For [`conv2d_transpose`] the same tensor is read as the adjoint: it maps
/// `out_c` input channels to `in_c` output channels.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: Padding) -> Result<Self> {
        let w = weight.shape();
        if bias.shape() != Shape::new(1, w.n, 1, 1) {
            return Err(SegError::InvalidShape {
                op: "ConvParams",
                reason: format!("bias {} does not match weight {w}", bias.shape()),
            });
        }
        if stride == 0 {
            return Err(SegError::InvalidArgument("stride must be positive".into()));
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Parameters for [`conv2d_transpose`]: `bias` has shape `(1, in_c, 1, 1)`
    /// because the weight is applied as the adjoint.
    pub fn transposed(weight: Tensor, bias: Tensor, stride: usize) -> Result<Self> {
        let w = weight.shape();
        if bias.shape() != Shape::new(1, w.c, 1, 1) {
            return Err(SegError::InvalidShape {
                op: "ConvParams::transposed",
                reason: format!("bias {} does not match weight {w}", bias.shape()),
            });
        }
        if stride == 0 {
            return Err(SegError::InvalidArgument("stride must be positive".into()));
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding: Padding::Valid,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }
}

/// Shape bookkeeping for a forward convolution from `input` (with `in_c`
/// channels) to `(n, out_c, oh, ow)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    input: Shape,
    out_c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_t: usize,
    pad_l: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(input: Shape, weight: Shape, stride: usize, padding: Padding) -> Result<Self> {
        let (kh, kw) = (weight.h, weight.w);
        let dim = |len: usize, k: usize| -> Result<(usize, usize)> {
            match padding {
                Padding::Same => {
                    let out = len.div_ceil(stride);
                    let total = ((out.max(1) - 1) * stride + k).saturating_sub(len);
                    Ok((out, total / 2))
                }
                Padding::Valid => {
                    if len < k {
                        return Err(SegError::InvalidShape {
                            op: "conv2d",
                            reason: format!(
                                "input extent {len} is smaller than kernel {k} with valid padding"
                            ),
                        });
                    }
                    Ok(((len - k) / stride + 1, 0))
                }
            }
        };
        let (oh, pad_t) = dim(input.h, kh)?;
        let (ow, pad_l) = dim(input.w, kw)?;
        if oh == 0 || ow == 0 {
            return Err(SegError::InvalidShape {
                op: "conv2d",
                reason: format!("output would be empty for input {input}"),
            });
        }
        Ok(Geometry {
            input,
            out_c: weight.n,
            kh,
            kw,
            stride,
            pad_t,
            pad_l,
            oh,
            ow,
        })
    }

    fn output(&self) -> Shape {
        Shape::new(self.input.n, self.out_c, self.oh, self.ow)
    }

    fn k(&self) -> usize {
        self.input.c * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_t == 0 && self.pad_l == 0
    }

    /// Output rows per im2col band.
    fn band_rows(&self) -> usize {
        const BAND_ELEMS: usize = 1 << 20;
        (BAND_ELEMS / (self.k() * self.ow).max(1)).clamp(1, self.oh)
    }

    fn bands(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.band_rows();
        let oh = self.oh;
        (0..oh).step_by(step).map(move |r0| (r0, (r0 + step).min(oh)))
    }

    /// Fills `col` (K × px for rows `r0..r1`) from one input image.
    fn im2col(&self, x: &[f64], r0: usize, r1: usize, col: &mut [f64]) {
        let (h, w) = (self.input.h as isize, self.input.w as isize);
        let px = (r1 - r0) * self.ow;
        let plane = self.input.plane();
        let mut row = 0;
        for ci in 0..self.input.c {
            let src = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut col[row * px..(row + 1) * px];
                    let mut p = 0;
                    for oy in r0..r1 {
                        let iy = (oy * self.stride + ky) as isize - self.pad_t as isize;
                        if iy < 0 || iy >= h {
                            dst[p..p + self.ow].fill(0.0);
                            p += self.ow;
                            continue;
                        }
                        let base = iy as usize * self.input.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad_l as isize;
                            dst[p] = if ix < 0 || ix >= w {
                                0.0
                            } else {
                                src[base + ix as usize]
                            };
                            p += 1;
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-adds `col` back into one input-image gradient.
    fn col2im(&self, col: &[f64], r0: usize, r1: usize, dx: &mut [f64]) {
        let (h, w) = (self.input.h as isize, self.input.w as isize);
        let px = (r1 - r0) * self.ow;
        let plane = self.input.plane();
        let mut row = 0;
        for ci in 0..self.input.c {
            let dst = &mut dx[ci * plane..(ci + 1) * plane];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &col[row * px..(row + 1) * px];
                    let mut p = 0;
                    for oy in r0..r1 {
                        let iy = (oy * self.stride + ky) as isize - self.pad_t as isize;
                        if iy < 0 || iy >= h {
                            p += self.ow;
                            continue;
                        }
                        let base = iy as usize * self.input.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad_l as isize;
                            if ix >= 0 && ix < w {
                                dst[base + ix as usize] += src[p];
                            }
                            p += 1;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(k == 0 || a.len() > last(m, k, rsa, csa));
    assert!(k == 0 || b.len() > last(k, n, rsb, csb));
    assert!(c.len() > last(m, n, rsc, csc));
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `y = W ⋆ x` without bias.
pub(crate) fn conv_forward(geo: &Geometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let out = geo.output();
    let (k, plane_out) = (geo.k(), geo.oh * geo.ow);
    let in_item = geo.input.c * geo.input.plane();
    let out_item = geo.out_c * plane_out;
    let mut y = vec![0.0; out.numel()];
    let mut col = Vec::new();
    for n in 0..geo.input.n {
        let xs = &x[n * in_item..(n + 1) * in_item];
        let ys = &mut y[n * out_item..(n + 1) * out_item];
        if geo.is_pointwise() {
            gemm(geo.out_c, k, plane_out, w, (k, 1), xs, (plane_out, 1), 0.0, ys, (plane_out, 1));
            continue;
        }
        for (r0, r1) in geo.bands() {
            let px = (r1 - r0) * geo.ow;
            col.resize(k * px, 0.0);
            geo.im2col(xs, r0, r1, &mut col);
            gemm(
                geo.out_c,
                k,
                px,
                w,
                (k, 1),
                &col,
                (px, 1),
                0.0,
                &mut ys[r0 * geo.ow..],
                (plane_out, 1),
            );
        }
    }
    y
}

/// `dx = Wᵀ ⋆ dy`, the adjoint of [`conv_forward`] in its input.
pub(crate) fn conv_backward_data(geo: &Geometry, dy: &[f64], w: &[f64]) -> Vec<f64> {
    let (k, plane_out) = (geo.k(), geo.oh * geo.ow);
    let in_item = geo.input.c * geo.input.plane();
    let out_item = geo.out_c * plane_out;
    let mut dx = vec![0.0; geo.input.numel()];
    let mut col = Vec::new();
    for n in 0..geo.input.n {
        let dys = &dy[n * out_item..(n + 1) * out_item];
        let dxs = &mut dx[n * in_item..(n + 1) * in_item];
        if geo.is_pointwise() {
            gemm(k, geo.out_c, plane_out, w, (1, k), dys, (plane_out, 1), 0.0, dxs, (plane_out, 1));
            continue;
        }
        for (r0, r1) in geo.bands() {
            let px = (r1 - r0) * geo.ow;
            col.resize(k * px, 0.0);
            gemm(
                k,
                geo.out_c,
                px,
                w,
                (1, k),
                &dys[r0 * geo.ow..],
                (plane_out, 1),
                0.0,
                &mut col,
                (px, 1),
            );
            geo.col2im(&col, r0, r1, dxs);
        }
    }
    dx
}

/// `dW = Σ dy · im2col(x)ᵀ`.
pub(crate) fn conv_backward_weight(geo: &Geometry, x: &[f64], dy: &[f64]) -> Vec<f64> {
    let (k, plane_out) = (geo.k(), geo.oh * geo.ow);
    let in_item = geo.input.c * geo.input.plane();
    let out_item = geo.out_c * plane_out;
    let mut dw = vec![0.0; geo.out_c * k];
    let mut col = Vec::new();
    for n in 0..geo.input.n {
        let xs = &x[n * in_item..(n + 1) * in_item];
        let dys = &dy[n * out_item..(n + 1) * out_item];
        if geo.is_pointwise() {
            gemm(geo.out_c, plane_out, k, dys, (plane_out, 1), xs, (1, plane_out), 1.0, &mut dw, (k, 1));
            continue;
        }
        for (r0, r1) in geo.bands() {
            let px = (r1 - r0) * geo.ow;
            col.resize(k * px, 0.0);
            geo.im2col(xs, r0, r1, &mut col);
            gemm(
                geo.out_c,
                px,
                k,
                &dys[r0 * geo.ow..],
                (plane_out, 1),
                &col,
                (1, px),
                1.0,
                &mut dw,
                (k, 1),
            );
        }
    }
    dw
}

fn add_bias(y: &mut [f64], shape: Shape, bias: &[f64]) {
    let plane = shape.plane();
    for (i, chunk) in y.chunks_mut(plane).enumerate() {
        let b = bias[i % shape.c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(dy: &[f64], shape: Shape) -> Vec<f64> {
    let plane = shape.plane();
    let mut db = vec![0.0; shape.c];
    for (i, chunk) in dy.chunks(plane).enumerate() {
        db[i % shape.c] += chunk.iter().sum::<f64>();
    }
    db
}

/// Cross-correlation of `x` with `p.weight` plus bias.
pub fn conv2d(tape: &mut Tape, x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let ws = p.weight.shape();
    if x.shape().c != ws.c {
        return Err(SegError::ShapeMismatch {
            op: "conv2d (input channels vs weight)",
            left: x.shape(),
            right: ws,
        });
    }
    let geo = Geometry::new(x.shape(), ws, p.stride, p.padding)?;
    let out_shape = geo.output();
    let mut y = conv_forward(&geo, x.data(), p.weight.data());
    add_bias(&mut y, out_shape, p.bias.data());
    let out = Tensor::from_parts(out_shape, y);

    let (xs, w) = (x.detach(), p.weight.detach());
    tape.record("conv2d", out, &[x, &p.weight, &p.bias], move |g, needs| {
        let dy = g.data();
        vec![
            needs[0].then(|| conv_backward_data(&geo, dy, w.data())),
            needs[1].then(|| conv_backward_weight(&geo, xs.data(), dy)),
            needs[2].then(|| bias_grad(dy, out_shape)),
        ]
    })
}

/// Transposed convolution: the adjoint of a valid-padded `conv2d` with the
/// same weight and `stride`. Output extent is `(in - 1)·stride + k`, which is
/// `in·stride` for the 2×2/stride-2 decoder upsampling.
pub fn conv2d_transpose(tape: &mut Tape, x: &Tensor, p: &ConvParams, stride: usize) -> Result<Tensor> {
    let ws = p.weight.shape();
    let xs = x.shape();
    if xs.c != ws.n {
        return Err(SegError::ShapeMismatch {
            op: "conv2d_transpose (input channels vs weight)",
            left: xs,
            right: ws,
        });
    }
    if stride == 0 {
        return Err(SegError::InvalidArgument("stride must be positive".into()));
    }
    if p.padding != Padding::Valid {
        return Err(SegError::InvalidArgument(
            "conv2d_transpose is defined as the adjoint of a valid-padded conv2d".into(),
        ));
    }
    if p.bias.shape() != Shape::new(1, ws.c, 1, 1) {
        return Err(SegError::InvalidShape {
            op: "conv2d_transpose",
            reason: format!("bias {} must have {} channels", p.bias.shape(), ws.c),
        });
    }
    if xs.h == 0 || xs.w == 0 {
        return Err(SegError::InvalidShape {
            op: "conv2d_transpose",
            reason: format!("empty input {xs}"),
        });
    }
    let out_shape = Shape::new(
        xs.n,
        ws.c,
        (xs.h - 1) * stride + ws.h,
        (xs.w - 1) * stride + ws.w,
    );
    let geo = Geometry::new(out_shape, ws, stride, Padding::Valid)?;
    debug_assert_eq!(geo.output(), xs);
    let mut y = conv_backward_data(&geo, x.data(), p.weight.data());
    add_bias(&mut y, out_shape, p.bias.data());
    let out = Tensor::from_parts(out_shape, y);

    let (xd, w) = (x.detach(), p.weight.detach());
    tape.record("conv2d_transpose", out, &[x, &p.weight, &p.bias], move |g, needs| {
        let dy = g.data();
        vec![
            needs[0].then(|| conv_forward(&geo, dy, w.data())),
            needs[1].then(|| conv_backward_weight(&geo, dy, xd.data())),
            needs[2].then(|| bias_grad(dy, out_shape)),
        ]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(weight: Tensor, stride: usize, padding: Padding) -> ConvParams {
        let oc = weight.shape().n;
        ConvParams::new(weight, Tensor::zeros(Shape::new(1, oc, 1, 1)), stride, padding).unwrap()
    }

    fn tparams(weight: Tensor, stride: usize) -> ConvParams {
        let ic = weight.shape().c;
        ConvParams::transposed(weight, Tensor::zeros(Shape::new(1, ic, 1, 1)), stride).unwrap()
    }

    /// Direct nested-loop cross-correlation.
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize, oh: usize, ow: usize) -> Tensor {
        let (xs, ws) = (x.shape(), w.shape());
        Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |n, o, y, xx| {
            let mut acc = 0.0;
            for c in 0..ws.c {
                for ky in 0..ws.h {
                    for kx in 0..ws.w {
                        let iy = (y * stride + ky) as isize - pad as isize;
                        let ix = (xx * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                            acc += x.at(n, c, iy as usize, ix as usize) * w.at(o, c, ky, kx);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn same_padding_window_sums() {
        let mut tape = Tape::new();
        let x = Tensor::ones(Shape::new(1, 1, 3, 3));
        let p = params(Tensor::ones(Shape::new(1, 1, 3, 3)), 1, Padding::Same);
        let y = conv2d(&mut tape, &x, &p).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn valid_padding_single_window() {
        let mut tape = Tape::new();
        let x = Tensor::ones(Shape::new(1, 1, 3, 3));
        let p = params(Tensor::ones(Shape::new(1, 1, 3, 3)), 1, Padding::Valid);
        let y = conv2d(&mut tape, &x, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn identity_pointwise_kernel() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(Shape::new(2, 1, 4, 5), 1.0, &mut rng);
        let p = params(Tensor::ones(Shape::new(1, 1, 1, 1)), 1, Padding::Same);
        assert!(conv2d(&mut tape, &x, &p).unwrap().bit_eq(&x));
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        for &(h, w, k, stride) in &[(7, 5, 3, 1), (8, 8, 3, 2), (6, 9, 1, 1), (5, 5, 3, 3)] {
            let x = Tensor::randn(Shape::new(2, 3, h, w), 1.0, &mut rng);
            let wt = Tensor::randn(Shape::new(4, 3, k, k), 1.0, &mut rng);
            let p = params(wt.clone(), stride, Padding::Same);
            let y = conv2d(&mut tape, &x, &p).unwrap();
            let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
            let pad = (((oh - 1) * stride + k).saturating_sub(h)) / 2;
            let expect = naive_conv(&x, &wt, stride, pad, oh, ow);
            assert!(y.max_abs_diff(&expect) < 1e-12, "h={h} w={w} k={k} s={stride}");
        }
    }

    #[test]
    fn banding_matches_naive_on_wide_input() {
        // K·ow large enough to force several bands.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(Shape::new(1, 128, 40, 40), 1.0, &mut rng);
        let wt = Tensor::randn(Shape::new(2, 128, 3, 3), 0.1, &mut rng);
        let geo = Geometry::new(x.shape(), wt.shape(), 1, Padding::Same).unwrap();
        assert!(geo.band_rows() < geo.oh);
        let mut tape = Tape::new();
        let y = conv2d(&mut tape, &x, &params(wt.clone(), 1, Padding::Same)).unwrap();
        assert!(y.max_abs_diff(&naive_conv(&x, &wt, 1, 1, 40, 40)) < 1e-10);
    }

    #[test]
    fn channel_mismatch_is_error() {
        let mut tape = Tape::new();
        let x = Tensor::ones(Shape::new(1, 2, 3, 3));
        let p = params(Tensor::ones(Shape::new(1, 3, 3, 3)), 1, Padding::Same);
        assert!(matches!(conv2d(&mut tape, &x, &p), Err(SegError::ShapeMismatch { .. })));
        let small = Tensor::ones(Shape::new(1, 3, 2, 2));
        let pv = params(Tensor::ones(Shape::new(1, 3, 3, 3)), 1, Padding::Valid);
        assert!(conv2d(&mut tape, &small, &pv).is_err());
    }

    #[test]
    fn transpose_upsamples_constant() {
        let mut tape = Tape::new();
        let x = Tensor::scalar(5.0);
        let p = tparams(Tensor::ones(Shape::new(1, 1, 2, 2)), 2);
        let y = conv2d_transpose(&mut tape, &x, &p, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[5.0; 4]);
    }

    #[test]
    fn transpose_of_zero_is_zero() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = tparams(Tensor::randn(Shape::new(3, 2, 2, 2), 1.0, &mut rng), 2);
        let y = conv2d_transpose(&mut tape, &Tensor::zeros(Shape::new(1, 3, 4, 4)), &p, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 8, 8));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        for &(k, stride, h) in &[(2, 2, 8), (3, 1, 6), (3, 2, 7), (1, 1, 5)] {
            let wt = Tensor::randn(Shape::new(4, 3, k, k), 1.0, &mut rng);
            let p = params(wt.clone(), stride, Padding::Valid);
            let pt = tparams(wt, stride);
            let x = Tensor::randn(Shape::new(2, 3, h, h), 1.0, &mut rng);
            let cx = conv2d(&mut tape, &x, &p).unwrap();
            let y = Tensor::randn(cx.shape(), 1.0, &mut rng);
            let ty = conv2d_transpose(&mut tape, &y, &pt, stride).unwrap();
            // conv output of size o maps back to (o-1)s+k, which is ≤ h.
            let o = cx.shape().h;
            let back = (o - 1) * stride + k;
            let xs = Tensor::from_fn(ty.shape(), |n, c, i, j| x.at(n, c, i, j));
            assert_eq!(ty.shape().h, back);
            let lhs = cx.dot(&y);
            let rhs = xs.dot(&ty);
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }
}
