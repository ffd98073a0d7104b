//! Encoder/decoder assembly of both network variants.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod model;
pub mod roi;

pub use config::{EncoderConfig, Experiment, ModelConfig, Scale, Variant, DECODER_STRIDE, ENCODER_STRIDE};
pub use model::{count_params, DecoderOutputs, ForwardOutput, Model, ModelTrace};
pub use roi::{roi_crop, Affine, CropWindow, RoiBounds, RoiTransform};
