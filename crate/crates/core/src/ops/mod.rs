//! Tensor kernels: convolution, normalization, activations and resampling.

pub mod activation;
pub mod conv;
pub mod norm;
pub mod resample;
