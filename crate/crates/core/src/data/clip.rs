//! Frame loading and clip tensor assembly.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::Rgb32FImage;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loads an image as RGB with channels in `[0, 1]`.
pub fn load_frame(path: &Path) -> Result<Rgb32FImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb32f())
}

/// Paths of the `count` frames ending at the annotated frame. TuSimple clips
/// number their frames `1.jpg ..= 20.jpg` and annotate the last one.
pub fn clip_frame_paths(root: &Path, raw_file: &str, count: usize) -> Result<Vec<PathBuf>> {
    let annotated = root.join(raw_file);
    let stem = annotated
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse::<usize>().ok());
    let ext = annotated.extension().and_then(|e| e.to_str()).unwrap_or("jpg").to_string();
    let dir = annotated.parent().map(Path::to_path_buf).unwrap_or_default();
    match stem {
        Some(last) if last >= count => Ok((last + 1 - count..=last)
            .map(|i| dir.join(format!("{i}.{ext}")))
            .collect()),
        Some(last) => Err(Error::InvalidArgument(format!(
            "{raw_file}: clip has {last} frames before the annotated one, {count} requested"
        ))),
        None if count == 1 => Ok(vec![annotated]),
        None => Err(Error::InvalidArgument(format!(
            "{raw_file}: frame name is not numbered, cannot select {count} frames"
        ))),
    }
}

pub fn load_clip_frames(root: &Path, raw_file: &str, count: usize) -> Result<Vec<Rgb32FImage>> {
    clip_frame_paths(root, raw_file, count)?
        .iter()
        .map(|p| load_frame(p))
        .collect()
}

pub fn resize_frame(img: &Rgb32FImage, height: usize, width: usize) -> Rgb32FImage {
    if img.dimensions() == (width as u32, height as u32) {
        return img.clone();
    }
    image::imageops::resize(img, width as u32, height as u32, FilterType::Triangle)
}

/// `[1, 3, T, H, W]` volume from the last `t` frames, resized to `(height, width)`.
pub fn make_clip_tensor(frames: &[Rgb32FImage], t: usize, resolution: (usize, usize)) -> Result<Tensor<f32>> {
    if t == 0 || frames.len() < t {
        return Err(Error::InvalidArgument(format!(
            "clip has {} frames, {t} requested",
            frames.len()
        )));
    }
    let (h, w) = resolution;
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * t * plane];
    for (ti, f) in frames[frames.len() - t..].iter().enumerate() {
        let r = resize_frame(f, h, w);
        for (i, p) in r.pixels().enumerate() {
            for c in 0..3 {
                data[(c * t + ti) * plane + i] = p[c].clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(&[1, 3, t, h, w], data)
}

/// Stacks `[1, 3, T, H, W]` clips along the batch axis.
pub fn stack_clips(clips: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = clips
        .first()
        .ok_or_else(|| Error::InvalidArgument("no clips to stack".into()))?;
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * clips.len());
    for c in clips {
        if c.shape() != first.shape() {
            return Err(Error::shape("stack_clips", format!("{:?} vs {:?}", c.shape(), first.shape())));
        }
        data.extend_from_slice(c.data());
    }
    shape[0] = clips.len();
    Tensor::from_vec(&shape, data)
}
