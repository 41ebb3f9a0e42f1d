//! Per-pixel channel operations and spatial resampling.

use crate::error::{Result, SegError};
use crate::labels::LabelMap;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

/// Softmax over the channel axis at every pixel, with max subtraction.
pub fn softmax_channels(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.c < 2 {
        return Err(SegError::InvalidShape {
            op: "softmax_channels",
            reason: format!("needs at least 2 channels, got {s}"),
        });
    }
    let plane = s.plane();
    let data = x.data();
    let mut out = vec![0.0; s.numel()];
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let at = |c: usize| base + c * plane + p;
            let max = (0..s.c).map(|c| data[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..s.c {
                let e = (data[at(c)] - max).exp();
                out[at(c)] = e;
                total += e;
            }
            for c in 0..s.c {
                out[at(c)] /= total;
            }
        }
    }
    let out = Tensor::from_parts(s, out);
    let probs = out.clone();
    tape.record("softmax_channels", out, &[x], move |g, _| {
        let (g, p) = (g.data(), probs.data());
        let mut dx = vec![0.0; s.numel()];
        for n in 0..s.n {
            let base = n * s.c * plane;
            for px in 0..plane {
                let at = |c: usize| base + c * plane + px;
                let dot: f64 = (0..s.c).map(|c| g[at(c)] * p[at(c)]).sum();
                for c in 0..s.c {
                    dx[at(c)] = p[at(c)] * (g[at(c)] - dot);
                }
            }
        }
        vec![Some(dx)]
    })
}

/// Concatenates along channels, `a` first.
pub fn concat_channels(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(SegError::ShapeMismatch {
            op: "concat_channels",
            left: sa,
            right: sb,
        });
    }
    let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let (ia, ib) = (sa.c * sa.plane(), sb.c * sb.plane());
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * ia..(n + 1) * ia]);
        data.extend_from_slice(&b.data()[n * ib..(n + 1) * ib]);
    }
    let out = Tensor::from_parts(out_shape, data);
    tape.record("concat_channels", out, &[a, b], move |g, needs| {
        let g = g.data();
        let split = |first: bool| {
            let mut v = Vec::with_capacity(sa.n * if first { ia } else { ib });
            for n in 0..sa.n {
                let base = n * (ia + ib);
                if first {
                    v.extend_from_slice(&g[base..base + ia]);
                } else {
                    v.extend_from_slice(&g[base + ia..base + ia + ib]);
                }
            }
            v
        };
        vec![needs[0].then(|| split(true)), needs[1].then(|| split(false))]
    })
}

/// Source taps for one output coordinate of an align-corners=false resize.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resampling with half-pixel centers (align_corners = false).
pub fn resize_bilinear(tape: &mut Tape, x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 || s.h == 0 || s.w == 0 {
        return Err(SegError::InvalidArgument(format!(
            "cannot resize {s} to {out_h}×{out_w}"
        )));
    }
    let (ty, tx) = (taps(s.h, out_h), taps(s.w, out_w));
    let out_shape = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in x.data().chunks(s.plane()) {
        for y in &ty {
            for xx in &tx {
                let v = |r: usize, c: usize| plane[r * s.w + c];
                let top = v(y.lo, xx.lo) * (1.0 - xx.frac) + v(y.lo, xx.hi) * xx.frac;
                let bot = v(y.hi, xx.lo) * (1.0 - xx.frac) + v(y.hi, xx.hi) * xx.frac;
                out.push(top * (1.0 - y.frac) + bot * y.frac);
            }
        }
    }
    let out = Tensor::from_parts(out_shape, out);
    tape.record("resize_bilinear", out, &[x], move |g, _| {
        let mut dx = vec![0.0; s.numel()];
        for (plane, gp) in dx.chunks_mut(s.plane()).zip(g.data().chunks(out_h * out_w)) {
            let mut k = 0;
            for y in &ty {
                for xx in &tx {
                    let d = gp[k];
                    k += 1;
                    plane[y.lo * s.w + xx.lo] += d * (1.0 - y.frac) * (1.0 - xx.frac);
                    plane[y.lo * s.w + xx.hi] += d * (1.0 - y.frac) * xx.frac;
                    plane[y.hi * s.w + xx.lo] += d * y.frac * (1.0 - xx.frac);
                    plane[y.hi * s.w + xx.hi] += d * y.frac * xx.frac;
                }
            }
        }
        vec![Some(dx)]
    })
}

/// Index of the largest channel at every pixel; ties go to the lowest index.
pub fn argmax_channels(probs: &Tensor) -> Result<LabelMap> {
    let s = probs.shape();
    if s.c == 0 || s.c > 256 {
        return Err(SegError::InvalidShape {
            op: "argmax_channels",
            reason: format!("channel count must be in 1..=256, got {s}"),
        });
    }
    let plane = s.plane();
    let data = probs.data();
    let mut labels = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let mut best = 0;
            for c in 1..s.c {
                if data[base + c * plane + p] > data[base + best * plane + p] {
                    best = c;
                }
            }
            labels.push(best as u8);
        }
    }
    LabelMap::new(s.n, s.h, s.w, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pixel_sums(p: &Tensor) -> Vec<f64> {
        let s = p.shape();
        let mut sums = Vec::new();
        for n in 0..s.n {
            for y in 0..s.h {
                for x in 0..s.w {
                    sums.push((0..s.c).map(|c| p.at(n, c, y, x)).sum());
                }
            }
        }
        sums
    }

    #[test]
    fn uniform_logits() {
        let p = softmax_channels(&mut Tape::new(), &Tensor::zeros(Shape::new(1, 5, 2, 2))).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn large_logit_is_stable() {
        let x = Tensor::new(Shape::new(1, 5, 1, 1), vec![1000.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let p = softmax_channels(&mut Tape::new(), &x).unwrap();
        assert!(p.all_finite());
        assert!((p.data()[0] - 1.0).abs() < 1e-12);
        assert!(p.data()[1..].iter().all(|&v| v < 1e-300));
    }

    #[test]
    fn shift_invariance_and_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::randn(Shape::new(2, 5, 3, 3), 3.0, &mut rng);
        let shifted = Tensor::from_fn(x.shape(), |n, c, h, w| x.at(n, c, h, w) + 17.0 * (h + w) as f64);
        let mut tape = Tape::new();
        let p = softmax_channels(&mut tape, &x).unwrap();
        let q = softmax_channels(&mut tape, &shifted).unwrap();
        assert!(p.max_abs_diff(&q) < 1e-12);
        assert!(pixel_sums(&p).iter().all(|s| (s - 1.0).abs() < 1e-9));
        assert!(p.data().iter().all(|&v| v > 0.0));
        assert_eq!(argmax_channels(&p).unwrap(), argmax_channels(&x).unwrap());
    }

    #[test]
    fn softmax_needs_two_channels() {
        assert!(softmax_channels(&mut Tape::new(), &Tensor::zeros(Shape::new(1, 1, 2, 2))).is_err());
    }

    #[test]
    fn concat_shapes_and_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = Tensor::randn(Shape::new(2, 3, 4, 4), 1.0, &mut rng);
        let b = Tensor::randn(Shape::new(2, 2, 4, 4), 1.0, &mut rng);
        let mut tape = Tape::new();
        let ab = concat_channels(&mut tape, &a, &b).unwrap();
        assert_eq!(ab.shape(), Shape::new(2, 5, 4, 4));
        assert!(ab.slice_channels(0..3).unwrap().bit_eq(&a));
        assert!(ab.slice_channels(3..5).unwrap().bit_eq(&b));

        let big = concat_channels(
            &mut tape,
            &Tensor::zeros(Shape::new(1, 64, 8, 8)),
            &Tensor::zeros(Shape::new(1, 64, 8, 8)),
        )
        .unwrap();
        assert_eq!(big.shape(), Shape::new(1, 128, 8, 8));

        let empty = Tensor::zeros(Shape::new(2, 0, 4, 4));
        assert!(concat_channels(&mut tape, &a, &empty).unwrap().bit_eq(&a));
        assert!(concat_channels(&mut tape, &a, &Tensor::zeros(Shape::new(2, 1, 2, 4))).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Tensor::randn(Shape::new(1, 2, 5, 7), 1.0, &mut rng);
        let mut tape = Tape::new();
        assert!(resize_bilinear(&mut tape, &x, 5, 7).unwrap().max_abs_diff(&x) < 1e-12);
        let c = Tensor::full(Shape::new(1, 3, 4, 6), 7.0);
        for &(h, w) in &[(1, 1), (3, 9), (16, 5)] {
            let r = resize_bilinear(&mut tape, &c, h, w).unwrap();
            assert!(r.data().iter().all(|&v| (v - 7.0).abs() < 1e-12));
        }
    }

    #[test]
    fn resize_matches_scalar_bilinear_formula() {
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let r = resize_bilinear(&mut Tape::new(), &x, 4, 4).unwrap();
        // Independent per-pixel evaluation with clamped half-pixel sources.
        let src = |o: usize| ((o as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
        for oy in 0..4 {
            for ox in 0..4 {
                let (sy, sx) = (src(oy), src(ox));
                let f = |y: f64, x: f64| 4.0 * y + 2.0 * x; // exact for a bilinear ramp
                let expect = f(sy, sx);
                assert!((r.at(0, 0, oy, ox) - expect).abs() < 1e-12, "({oy},{ox})");
            }
        }
        assert_eq!(r.data()[..4], [0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn argmax_rules() {
        let uniform = Tensor::full(Shape::new(1, 5, 3, 3), 0.2);
        assert!(argmax_channels(&uniform).unwrap().labels().iter().all(|&l| l == 0));

        let hot = Tensor::from_fn(Shape::new(1, 5, 1, 5), |_, c, _, w| f64::from(c == w));
        assert_eq!(argmax_channels(&hot).unwrap().labels(), &[0, 1, 2, 3, 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let p = Tensor::from_fn(Shape::new(2, 5, 4, 4), |_, _, _, _| rng.random::<f64>());
        let got = argmax_channels(&p).unwrap();
        for n in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let mut best = 0;
                    for c in 0..5 {
                        if p.at(n, c, y, x) > p.at(n, best, y, x) {
                            best = c;
                        }
                    }
                    assert_eq!(got.get(n, y, x) as usize, best);
                }
            }
        }
    }
}
