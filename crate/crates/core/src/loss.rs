//! Soft Dice objective.

use crate::error::{Result, SegError};
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

/// Additive smoothing in both numerator and denominator.
pub const DICE_SMOOTH: f64 = 1e-7;

/// `(2·Σ p·g + ε) / (Σ p² + Σ g² + ε)` over one class plane.
pub fn dice_coefficient(p: &[f64], g: &[f64]) -> Result<f64> {
    if p.len() != g.len() {
        return Err(SegError::InvalidArgument(format!(
            "dice_coefficient: {} predictions vs {} targets",
            p.len(),
            g.len()
        )));
    }
    let (inter, pp, gg) = p.iter().zip(g).fold((0.0, 0.0, 0.0), |(i, a, b), (&p, &g)| {
        (i + p * g, a + p * p, b + g * g)
    });
    Ok((2.0 * inter + DICE_SMOOTH) / (pp + gg + DICE_SMOOTH))
}

/// Per-class `(Σ p·g, Σ p², Σ g²)` summed over batch and pixels.
fn class_sums(p: &[f64], g: &[f64], s: Shape) -> Vec<[f64; 3]> {
    let plane = s.plane();
    let mut acc = vec![[0.0; 3]; s.c];
    for (i, (pc, gc)) in p.chunks(plane).zip(g.chunks(plane)).enumerate() {
        let a = &mut acc[i % s.c];
        for (&pv, &gv) in pc.iter().zip(gc) {
            a[0] += pv * gv;
            a[1] += pv * pv;
            a[2] += gv * gv;
        }
    }
    acc
}

/// Per-class Dice over a whole batch, as used by [`dice_loss`].
pub fn dice_per_class(probs: &Tensor, truth: &Tensor) -> Result<Vec<f64>> {
    check_shapes(probs, truth)?;
    Ok(class_sums(probs.data(), truth.data(), probs.shape())
        .into_iter()
        .map(|[i, pp, gg]| (2.0 * i + DICE_SMOOTH) / (pp + gg + DICE_SMOOTH))
        .collect())
}

fn check_shapes(probs: &Tensor, truth: &Tensor) -> Result<()> {
    if probs.shape() != truth.shape() {
        return Err(SegError::ShapeMismatch {
            op: "dice_loss",
            left: probs.shape(),
            right: truth.shape(),
        });
    }
    if probs.shape().c == 0 {
        return Err(SegError::InvalidShape {
            op: "dice_loss",
            reason: "no classes".into(),
        });
    }
    Ok(())
}

/// `1 − mean_c dice_c`, where each class Dice sums over the whole batch.
pub fn dice_loss(tape: &mut Tape, probs: &Tensor, truth: &Tensor) -> Result<Tensor> {
    check_shapes(probs, truth)?;
    let s = probs.shape();
    let sums = class_sums(probs.data(), truth.data(), s);
    let k = s.c as f64;
    let mean_dice = sums
        .iter()
        .map(|&[i, pp, gg]| (2.0 * i + DICE_SMOOTH) / (pp + gg + DICE_SMOOTH))
        .sum::<f64>()
        / k;
    let out = Tensor::scalar(1.0 - mean_dice);
    let (p, g) = (probs.detach(), truth.detach());
    tape.record("dice_loss", out, &[probs, truth], move |up, needs| {
        let up = up.item();
        let plane = s.plane();
        // d(dice_c)/d(a) = (2·b·D − N·2·a) / D² where (a, b) = (p, g) or (g, p).
        let grad = |own: &[f64], other: &[f64]| -> Vec<f64> {
            own.iter()
                .zip(other)
                .enumerate()
                .map(|(idx, (&a, &b))| {
                    let [i, pp, gg] = sums[(idx / plane) % s.c];
                    let num = 2.0 * i + DICE_SMOOTH;
                    let den = pp + gg + DICE_SMOOTH;
                    -up / k * (2.0 * b * den - num * 2.0 * a) / (den * den)
                })
                .collect()
        };
        vec![
            needs[0].then(|| grad(p.data(), g.data())),
            needs[1].then(|| grad(g.data(), p.data())),
        ]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_overlap() {
        let g = [1.0, 0.0, 1.0, 1.0];
        assert!((dice_coefficient(&g, &g).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn disjoint_masks() {
        let p = [1.0, 1.0, 0.0, 0.0];
        let g = [0.0, 0.0, 1.0, 1.0];
        assert!(dice_coefficient(&p, &g).unwrap() < 1e-6);
    }

    #[test]
    fn soft_example() {
        let d = dice_coefficient(&[0.8, 0.6], &[1.0, 0.0]).unwrap();
        let expect = (2.0 * 0.8 + DICE_SMOOTH) / (0.64 + 0.36 + 1.0 + DICE_SMOOTH);
        assert!((d - expect).abs() < 1e-15);
        assert!((d - 0.8).abs() < 1e-7);
    }

    #[test]
    fn symmetric_for_binary() {
        let p = [1.0, 0.0, 1.0, 0.0, 1.0];
        let g = [1.0, 1.0, 0.0, 0.0, 1.0];
        assert_eq!(dice_coefficient(&p, &g).unwrap(), dice_coefficient(&g, &p).unwrap());
    }

    #[test]
    fn loss_zero_for_exact_one_hot() {
        let t = Tensor::from_fn(Shape::new(2, 3, 2, 2), |n, c, h, w| f64::from((n + h + w) % 3 == c));
        let l = dice_loss(&mut Tape::new(), &t, &t).unwrap().item();
        assert!(l.abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::zeros(Shape::new(1, 2, 2, 2));
        let b = Tensor::zeros(Shape::new(1, 3, 2, 2));
        assert!(dice_loss(&mut Tape::new(), &a, &b).is_err());
        assert!(dice_coefficient(&[1.0], &[1.0, 0.0]).is_err());
    }
}
