//! Central-difference gradient checking.

mod suite;

pub use suite::{
    check_arch, check_op, run_suite, CaseResult, GRADCHECK_EPS, GRADCHECK_THRESHOLD, OP_CASES,
};

use crate::error::{Result, SegError};
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

/// Result of comparing tape gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_relative_error: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// Kink margin seen by the analytic pass (see [`Tape::kink_margin`]).
    pub kink_margin: f64,
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

fn scalar_of(t: &Tensor) -> Result<f64> {
    if t.shape() != Shape::scalar() {
        return Err(SegError::NonScalarLoss(t.shape()));
    }
    let v = t.item();
    if !v.is_finite() {
        return Err(SegError::NonFinite(format!("function value {v}")));
    }
    Ok(v)
}

/// Checks `f` at `x`. Returns the maximum relative error over all entries.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &Tensor) -> Result<Tensor>,
{
    let mut f = f;
    let report = grad_check_inputs(
        |tape, xs| f(tape, &xs[0]),
        std::slice::from_ref(x),
        eps,
        None,
    )?;
    Ok(report.max_relative_error)
}

/// Checks a scalar function of several tensors.
///
/// `limit` caps how many entries of each input are perturbed; entries are
/// then taken at an even stride through the buffer.
pub fn grad_check_inputs<F>(
    mut f: F,
    inputs: &[Tensor],
    eps: f64,
    limit: Option<usize>,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(SegError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if let Some(bad) = inputs.iter().find(|t| !t.all_finite()) {
        return Err(SegError::NonFinite(format!("grad_check input of shape {}", bad.shape())));
    }

    let mut tape = Tape::new();
    let watched: Vec<Tensor> = inputs.iter().map(|t| tape.watch(t)).collect();
    let loss = f(&mut tape, &watched)?;
    scalar_of(&loss)?;
    let kink_margin = tape.kink_margin();
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = watched
        .iter()
        .map(|w| grads.get(w).expect("watched leaf has a gradient"))
        .collect();

    let mut eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        scalar_of(&f(&mut t, xs)?)
    };

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut current: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    for (which, input) in inputs.iter().enumerate() {
        let len = input.numel();
        let step = limit.map_or(1, |l| len.div_ceil(l.max(1)).max(1));
        for i in (0..len).step_by(step) {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut data = input.to_vec();
                data[i] += delta;
                current[which] = Tensor::new(input.shape(), data)?;
                eval(&current)
            };
            let plus = probe(eps)?;
            let minus = probe(-eps)?;
            current[which] = input.detach();
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[which].data()[i];
            worst = worst.max(relative_error(a, numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        checked,
        kink_margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_for_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = Tensor::randn(Shape::new(1, 2, 3, 3), 1.0, &mut rng);
        let err = grad_check(ops::sum_all, &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn relu_away_from_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let x = Tensor::randn(Shape::new(1, 2, 4, 4), 1.0, &mut rng)
            .map(|v| if v.abs() < 1e-4 { v + 1e-3 } else { v });
        let err = grad_check(
            |t, x| {
                let r = ops::relu(t, x)?;
                ops::sum_all(t, &r)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn nan_function_is_error() {
        let x = Tensor::scalar(1.0);
        let r = grad_check(|t, x| ops::scale(t, x, f64::NAN), &x, 1e-5);
        assert!(matches!(r, Err(SegError::NonFinite(_))));
    }

    #[test]
    fn bad_eps() {
        assert!(grad_check(ops::sum_all, &Tensor::scalar(1.0), 0.0).is_err());
    }
}
