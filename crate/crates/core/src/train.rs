//! Full-batch training steps and clip-level inference.

use std::path::Path;

use image::Rgb32FImage;

use crate::data::{
    augment, load_clip_frames, load_dataset, make_clip_tensor, rasterize_targets, stack_clips, AugmentConfig,
    ClipAnnotation, Sample, TrainingTargets,
};
use crate::error::{Error, Result};
use crate::losses::{total_loss, BatchTargets, LossBreakdown, LossWeights};
use crate::network::Model;
use crate::optim::Adam;
use crate::params::{ParamStore, Session};
use crate::postprocess::{lanes_to_annotation, postprocess_pipeline, LaneInstance, PostprocessConfig};
use crate::tensor::Tensor;

/// One clip ready for training: the last `T` frames, the clip tensor and targets.
#[derive(Clone, Debug)]
pub struct PreparedClip {
    pub ann: ClipAnnotation,
    pub frame_size: (usize, usize),
    pub frames: Vec<Rgb32FImage>,
    pub clip: Tensor<f32>,
    pub targets: TrainingTargets,
}

impl PreparedClip {
    pub fn new(model: &Model, ann: ClipAnnotation, frames: Vec<Rgb32FImage>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidArgument(format!("{}: no frames", ann.raw_file)))?;
        let frame_size = (first.width() as usize, first.height() as usize);
        let enc = &model.config.encoder;
        let clip = make_clip_tensor(&frames, enc.temporal_depth, enc.input_resolution)?;
        let targets = rasterize_targets(&ann, &model.target_grid(frame_size.0, frame_size.1))?;
        Ok(Self {
            ann,
            frame_size,
            frames,
            clip,
            targets,
        })
    }

    /// Augmented copy with freshly rasterized targets.
    pub fn augmented(&self, model: &Model, cfg: &AugmentConfig) -> Result<Self> {
        let (frames, ann, _) = augment(&self.frames, &self.ann, cfg)?;
        Self::new(model, ann, frames)
    }
}

pub fn load_sample(root: &Path, model: &Model, sample: &Sample) -> Result<PreparedClip> {
    let frames = load_clip_frames(root, &sample.ann.raw_file, model.config.encoder.temporal_depth)?;
    PreparedClip::new(model, sample.ann.clone(), frames)
}

pub fn load_training_set(root: &Path, model: &Model) -> Result<Vec<PreparedClip>> {
    load_dataset(root)?.iter().map(|s| load_sample(root, model, s)).collect()
}

pub fn stack_batch(clips: &[&PreparedClip]) -> Result<(Tensor<f32>, BatchTargets)> {
    let tensors: Vec<Tensor<f32>> = clips.iter().map(|c| c.clip.clone()).collect();
    let targets: Vec<TrainingTargets> = clips.iter().map(|c| c.targets.clone()).collect();
    Ok((stack_clips(&tensors)?, BatchTargets::stack(&targets)?))
}

/// Seed for the augmentation of clip `index` at `step`.
pub fn augment_seed(seed: u64, step: usize, index: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// One forward/backward/Adam update on a batch. Batch-norm running statistics
/// are updated as a side effect.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
    clip: &Tensor<f32>,
    targets: &BatchTargets,
    weights: &LossWeights,
    dropout_seed: u64,
) -> Result<LossBreakdown> {
    let (grads, updates, breakdown) = {
        let mut s = Session::new(store, true, true, dropout_seed);
        let out = model.forward(&mut s, clip)?;
        let (loss, breakdown) = total_loss(&mut s.tape, &out, targets, weights, model.variant())?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("loss is {}", breakdown.total)));
        }
        let mut g = s.tape.backward(loss)?;
        (s.param_grads(&mut g), s.take_stat_updates(), breakdown)
    };
    store.apply_stat_updates(&updates);
    adam.step(store, &grads)?;
    if !store.all_finite() {
        return Err(Error::NonFinite("parameters became non-finite".into()));
    }
    Ok(breakdown)
}

/// Loss of a batch in inference mode (running statistics, no dropout).
pub fn evaluate_loss(model: &Model, store: &ParamStore<f32>, clip: &Tensor<f32>, targets: &BatchTargets, weights: &LossWeights) -> Result<LossBreakdown> {
    let mut s = Session::new(store, false, false, 0);
    let out = model.forward(&mut s, clip)?;
    Ok(total_loss(&mut s.tape, &out, targets, weights, model.variant())?.1)
}

/// Lane instances for each clip of a batch tensor.
pub fn detect_lanes(
    model: &Model,
    store: &ParamStore<f32>,
    clip: &Tensor<f32>,
    frame_size: (usize, usize),
    pp: &PostprocessConfig,
) -> Result<Vec<Vec<LaneInstance>>> {
    model
        .infer(store, clip, frame_size)?
        .iter()
        .map(|maps| postprocess_pipeline(maps, pp))
        .collect()
}

/// Prediction record for one clip sampled on `h_samples`.
pub fn predict_clip(
    model: &Model,
    store: &ParamStore<f32>,
    clip: &Tensor<f32>,
    frame_size: (usize, usize),
    h_samples: &[f64],
    raw_file: &str,
    pp: &PostprocessConfig,
) -> Result<ClipAnnotation> {
    let lanes = detect_lanes(model, store, clip, frame_size, pp)?.remove(0);
    let margin = model.frame_transform(frame_size.0, frame_size.1).sy * crate::network::DECODER_STRIDE as f64;
    Ok(lanes_to_annotation(&lanes, h_samples, frame_size.0, margin, raw_file))
}
