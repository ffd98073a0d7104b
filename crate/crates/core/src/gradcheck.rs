//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Which coordinates of each input to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// Up to this many randomly chosen coordinates per input tensor.
    Sampled { per_input: usize, seed: u64 },
}

/// Checks an operation that returns a scalar value together with its analytic
/// gradient for each input. Returns the maximum relative error.
pub fn grad_check<F>(op: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    grad_check_with(op, inputs, h, Coverage::All)
}

pub fn grad_check_with<F>(op: F, inputs: &[Tensor<f64>], h: f64, coverage: Coverage) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    let (_, analytic) = op(inputs)?;
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in coordinates(input.numel(), i, coverage) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let (plus, _) = op(&work)?;
            work[i].data_mut()[j] = orig - h;
            let (minus, _) = op(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Checks `analytic` against central differences of `value`. Each coordinate
/// is differenced at every step of `steps` (decreasing); for each pair of
/// neighbouring steps the error of the smaller-step estimate is bounded by
/// their disagreement (truncation, kinks inside `[x − h, x + h]`) plus a
/// round-off term `ROUNDOFF_ULPS · ulp(f) / h`, and the estimate with the
/// smallest bound is kept. The choice never looks at the analytic value.
pub fn grad_check_stepped<F>(
    analytic: &[Tensor<f64>],
    value: F,
    inputs: &[Tensor<f64>],
    steps: &[f64],
    coverage: Coverage,
) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    if steps.len() < 2 || steps.windows(2).any(|w| w[1] >= w[0]) || steps[steps.len() - 1] <= 0.0 {
        return Err(crate::error::Error::InvalidArgument(
            "steps must be at least two positive values in decreasing order".into(),
        ));
    }
    if analytic.len() != inputs.len() || analytic.iter().zip(inputs).any(|(a, x)| a.shape() != x.shape()) {
        return Err(crate::error::Error::InvalidArgument("analytic gradients do not match the inputs".into()));
    }
    let f0 = value(inputs)?;
    let roundoff = ROUNDOFF_ULPS * f64::EPSILON * f0.abs().max(f64::MIN_POSITIVE);
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in coordinates(input.numel(), i, coverage) {
            let orig = work[i].data()[j];
            let mut estimates: Vec<f64> = Vec::with_capacity(steps.len());
            for (k, &h) in steps.iter().enumerate() {
                work[i].data_mut()[j] = orig + h;
                let plus = value(&work)?;
                work[i].data_mut()[j] = orig - h;
                let minus = value(&work)?;
                let d = (plus - minus) / (2.0 * h);
                estimates.push(d);
                if k > 0 && (estimates[k - 1] - d).abs() + roundoff / h <= EARLY_ACCEPT * d.abs() {
                    break;
                }
            }
            work[i].data_mut()[j] = orig;
            let bound = |k: usize| (estimates[k] - estimates[k + 1]).abs() + roundoff / steps[k + 1];
            let best = (0..estimates.len() - 1)
                .min_by(|&a, &b| bound(a).total_cmp(&bound(b)))
                .unwrap_or(0);
            worst = worst.max(relative_error(analytic[i].data()[j], estimates[best + 1]));
        }
    }
    Ok(worst)
}

/// Round-off of one loss evaluation, in units of `ε·|f|`.
pub const ROUNDOFF_ULPS: f64 = 16.0;
/// Smaller steps are skipped once an estimate's bound is this small relative
/// to the estimate itself.
pub const EARLY_ACCEPT: f64 = 1e-5;

fn coordinates(numel: usize, input: usize, coverage: Coverage) -> Vec<usize> {
    match coverage {
        Coverage::All => (0..numel).collect(),
        Coverage::Sampled { per_input, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(input as u64));
            let mut idx = sample(&mut rng, numel, per_input.min(numel)).into_vec();
            idx.sort_unstable();
            idx
        }
    }
}

/// Adapts a tape-built function into a scalar op for [`grad_check`]. Non-scalar
/// outputs are reduced with a fixed random projection.
pub fn tape_op<F>(build: F, projection_seed: u64) -> impl Fn(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    move |inputs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars)?;
        let root = if tape.value(out).numel() == 1 {
            out
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(projection_seed);
            let weights = Tensor::randn(tape.value(out).shape(), 1.0, &mut rng);
            tape.project(out, weights)?
        };
        let value = tape.value(root).item();
        let mut grads = tape.backward(root)?;
        let g = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact() {
        let op = |x: &[Tensor<f64>]| Ok((3.0 * x[0].item(), vec![Tensor::scalar(3.0)]));
        let err = grad_check(op, &[Tensor::scalar(0.7)], 1e-3).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let op = |x: &[Tensor<f64>]| Ok((x[0].item().powi(2), vec![Tensor::scalar(x[0].item())]));
        let err = grad_check(op, &[Tensor::scalar(2.0)], 1e-4).unwrap();
        assert!(err > 0.4);
    }

    #[test]
    fn stepped_check_survives_a_nearby_kink() {
        // |x| sampled 1e-5 from its kink: a 1e-3 step straddles it
        let value = |x: &[Tensor<f64>]| Ok(x[0].item().abs() + 1.0);
        let x = [Tensor::scalar(1e-5)];
        let g = [Tensor::scalar(1.0)];
        let op = |x: &[Tensor<f64>]| Ok((x[0].item().abs() + 1.0, vec![Tensor::scalar(1.0)]));
        assert!(grad_check(op, &x, 1e-3).unwrap() > 0.5);
        let err = grad_check_stepped(&g, value, &x, &[1e-3, 1e-4, 1e-6, 1e-7], Coverage::All).unwrap();
        assert!(err < 1e-6, "{err}");
        assert!(grad_check_stepped(&g, value, &x, &[1e-3], Coverage::All).is_err());
        assert!(grad_check_stepped(&g, value, &x, &[1e-6, 1e-3], Coverage::All).is_err());
    }

    #[test]
    fn stepped_check_prefers_steps_above_roundoff() {
        // tiny slope on a large offset: small steps only see rounding
        let value = |x: &[Tensor<f64>]| Ok(4.0 + 3e-8 * x[0].item());
        let g = [Tensor::scalar(3e-8)];
        let steps = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9];
        let x = [Tensor::scalar(0.3)];
        let err = grad_check_stepped(&g, value, &x, &steps, Coverage::All).unwrap();
        assert!(err < 1e-3, "{err}");
        let fixed = |x: &[Tensor<f64>]| Ok((4.0 + 3e-8 * x[0].item(), vec![Tensor::scalar(3e-8)]));
        assert!(grad_check(fixed, &x, 1e-9).unwrap() > 1e-2);
    }

    #[test]
    fn stepped_check_still_catches_wrong_gradients() {
        let value = |x: &[Tensor<f64>]| Ok(x[0].item().powi(3));
        let g = [Tensor::scalar(2.0 * 1.5)];
        let err = grad_check_stepped(&g, value, &[Tensor::scalar(1.5)], &[1e-2, 1e-4, 1e-6], Coverage::All).unwrap();
        assert!(err > 0.3);
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::from_vec(&[4], vec![-1.5, -0.3, 0.4, 2.0]).unwrap();
        let op = tape_op(|t, v| t.relu(v[0]), 1);
        let err = grad_check(op, &[x], 1e-3).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
