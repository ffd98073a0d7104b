//! Batch normalization over the `N, T, H, W` axes of a rank-5 tensor.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Inference,
}

#[derive(Clone, Debug)]
pub struct BatchNormState<R: Real = f32> {
    pub gamma: Tensor<R>,
    pub beta: Tensor<R>,
    pub running_mean: Tensor<R>,
    pub running_var: Tensor<R>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: NormMode,
}

impl<R: Real> BatchNormState<R> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            mode: NormMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// Per-channel statistics saved by the training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (normalizer of the forward pass).
    pub var: Vec<f64>,
    /// Number of reduced elements per channel.
    pub count: usize,
}

fn layout<R: Real>(input: &Tensor<R>, channels: usize) -> Result<(usize, usize, usize)> {
    let [n, c, t, h, w] = input.dims5("batch_norm")?;
    if c != channels {
        return Err(Error::shape(
            "batch_norm",
            format!("input has {c} channels, parameters have {channels}"),
        ));
    }
    Ok((n, c, t * h * w))
}

pub fn batch_stats<R: Real>(input: &Tensor<R>, channels: usize) -> Result<BatchStats> {
    let (n, c, plane) = layout(input, channels)?;
    let x = input.data();
    let count = n * plane;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            s += x[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / count as f64;
        let mut ss = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            ss += x[off..off + plane].iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = ss / count as f64;
    }
    Ok(BatchStats { mean, var, count })
}

/// `y = γ·(x − μ)/√(σ² + eps) + β` using the supplied per-channel moments.
pub fn normalize<R: Real>(
    input: &Tensor<R>,
    gamma: &Tensor<R>,
    beta: &Tensor<R>,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Tensor<R>> {
    let (n, c, plane) = layout(input, gamma.numel())?;
    if beta.numel() != c || mean.len() != c || var.len() != c {
        return Err(Error::shape("batch_norm", "parameter lengths disagree"));
    }
    let mut out = input.clone();
    let y = out.data_mut();
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let scale = R::lit(gamma.data()[ch].as_f64() * inv);
        let shift = R::lit(beta.data()[ch].as_f64() - gamma.data()[ch].as_f64() * mean[ch] * inv);
        for b in 0..n {
            let off = (b * c + ch) * plane;
            y[off..off + plane].iter_mut().for_each(|v| *v = *v * scale + shift);
        }
    }
    Ok(out)
}

/// Applies batch normalization; in training mode the running statistics are
/// blended with the batch statistics (unbiased variance) by `momentum`.
pub fn batch_norm<R: Real>(input: &Tensor<R>, state: &mut BatchNormState<R>) -> Result<Tensor<R>> {
    if state.eps <= 0.0 {
        return Err(Error::InvalidArgument("batch norm eps must be positive".into()));
    }
    match state.mode {
        NormMode::Inference => {
            let mean: Vec<f64> = state.running_mean.data().iter().map(|v| v.as_f64()).collect();
            let var: Vec<f64> = state.running_var.data().iter().map(|v| v.as_f64()).collect();
            normalize(input, &state.gamma, &state.beta, &mean, &var, state.eps)
        }
        NormMode::Train => {
            let stats = batch_stats(input, state.channels())?;
            let out = normalize(input, &state.gamma, &state.beta, &stats.mean, &stats.var, state.eps)?;
            update_running(&mut state.running_mean, &mut state.running_var, &stats, state.momentum);
            Ok(out)
        }
    }
}

pub fn update_running<R: Real>(
    running_mean: &mut Tensor<R>,
    running_var: &mut Tensor<R>,
    stats: &BatchStats,
    momentum: f64,
) {
    let unbias = if stats.count > 1 {
        stats.count as f64 / (stats.count - 1) as f64
    } else {
        1.0
    };
    for (ch, (m, v)) in running_mean
        .data_mut()
        .iter_mut()
        .zip(running_var.data_mut().iter_mut())
        .enumerate()
    {
        *m = R::lit((1.0 - momentum) * m.as_f64() + momentum * stats.mean[ch]);
        *v = R::lit(((1.0 - momentum) * v.as_f64() + momentum * stats.var[ch] * unbias).max(0.0));
    }
}

pub struct NormGrads<R: Real> {
    pub input: Tensor<R>,
    pub gamma: Tensor<R>,
    pub beta: Tensor<R>,
}

/// Backward pass. With `batch_statistics` the moments depend on the input and
/// their derivative is included; otherwise they are treated as constants.
pub fn batch_norm_backward<R: Real>(
    input: &Tensor<R>,
    gamma: &Tensor<R>,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    upstream: &Tensor<R>,
    batch_statistics: bool,
) -> Result<NormGrads<R>> {
    let (n, c, plane) = layout(input, gamma.numel())?;
    if upstream.shape() != input.shape() {
        return Err(Error::shape("batch_norm_backward", "upstream shape differs from input"));
    }
    let x = input.data();
    let dy = upstream.data();
    let m = (n * plane) as f64;
    let mut dx = vec![R::zero(); x.len()];
    let mut dgamma = vec![R::zero(); c];
    let mut dbeta = vec![R::zero(); c];
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let g = gamma.data()[ch].as_f64();
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let xhat = (x[i].as_f64() - mean[ch]) * inv;
                let d = dy[i].as_f64();
                sum_dy += d;
                sum_dy_xhat += d * xhat;
            }
        }
        dgamma[ch] = R::lit(sum_dy_xhat);
        dbeta[ch] = R::lit(sum_dy);
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let d = dy[i].as_f64();
                dx[i] = R::lit(if batch_statistics {
                    let xhat = (x[i].as_f64() - mean[ch]) * inv;
                    g * inv * (d - sum_dy / m - xhat * sum_dy_xhat / m)
                } else {
                    g * inv * d
                });
            }
        }
    }
    Ok(NormGrads {
        input: Tensor::from_vec(input.shape(), dx)?,
        gamma: Tensor::from_vec(&[c], dgamma)?,
        beta: Tensor::from_vec(&[c], dbeta)?,
    })
}
