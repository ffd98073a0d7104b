//! Elementwise activations and dropout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub fn relu<R: Real>(input: &Tensor<R>) -> Tensor<R> {
    input.map(|v| v.max(R::zero()))
}

pub fn relu_backward<R: Real>(input: &Tensor<R>, upstream: &Tensor<R>) -> Tensor<R> {
    input
        .zip_map(upstream, |x, g| if x > R::zero() { g } else { R::zero() })
        .expect("relu_backward shapes")
}

pub fn leaky_relu<R: Real>(input: &Tensor<R>, slope: f64) -> Tensor<R> {
    let s = R::lit(slope);
    input.map(|v| if v > R::zero() { v } else { v * s })
}

pub fn leaky_relu_backward<R: Real>(input: &Tensor<R>, slope: f64, upstream: &Tensor<R>) -> Tensor<R> {
    let s = R::lit(slope);
    input
        .zip_map(upstream, |x, g| if x > R::zero() { g } else { g * s })
        .expect("leaky_relu_backward shapes")
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar<R: Real>(v: R) -> R {
    if v >= R::zero() {
        R::one() / (R::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (R::one() + e)
    }
}

pub fn sigmoid<R: Real>(input: &Tensor<R>) -> Tensor<R> {
    input.map(sigmoid_scalar)
}

pub fn sigmoid_backward<R: Real>(output: &Tensor<R>, upstream: &Tensor<R>) -> Tensor<R> {
    output
        .zip_map(upstream, |y, g| g * y * (R::one() - y))
        .expect("sigmoid_backward shapes")
}

/// Keep-mask for inverted dropout: each entry is `0` with probability `p`,
/// otherwise `1/(1−p)`. Deterministic in `seed`.
pub fn dropout_mask<R: Real>(numel: usize, p: f64, seed: u64) -> Result<Vec<R>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
    }
    let keep = R::lit(1.0 / (1.0 - p));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..numel)
        .map(|_| if rng.random::<f64>() < p { R::zero() } else { keep })
        .collect())
}

pub fn dropout<R: Real>(input: &Tensor<R>, p: f64, training: bool, seed: u64) -> Result<Tensor<R>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask::<R>(input.numel(), p, seed)?;
    let mut out = input.clone();
    out.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
    Ok(out)
}
