//! Spatiotemporal lane detection from short video clips.

pub mod attention;
pub mod data;
pub mod error;
pub mod fpn;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod optim;
pub mod params;
pub mod postprocess;
pub mod real;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Session};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
