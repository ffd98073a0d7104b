//! TuSimple data: annotations, target maps, augmentation and clip loading.

pub mod augment;
pub mod clip;
pub mod fixture;
pub mod targets;
pub mod tusimple;

use std::fs;
use std::path::{Path, PathBuf};

pub use augment::{augment, AugmentConfig, AugmentDraw};
pub use clip::{load_clip_frames, load_frame, make_clip_tensor, stack_clips};
pub use fixture::{generate_fixture, FixtureSpec};
pub use targets::{rasterize_targets, TargetGrid, TrainingTargets};
pub use tusimple::{parse_tusimple, serialize_tusimple, ClipAnnotation, ABSENT};

use crate::error::{Error, Result};

/// One annotated clip of a dataset root.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub ann: ClipAnnotation,
    /// `(width, height)` of the annotated frame.
    pub frame_size: (usize, usize),
}

/// `*.json` label files directly under `root`, sorted by name.
pub fn label_files(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_annotations(path: &Path) -> Result<Vec<ClipAnnotation>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_tusimple(&fs::read_to_string(path)?)
}

/// Reads every label file under `root` and the size of each annotated frame.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let files = label_files(root)?;
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no *.json label files in {}", root.display())));
    }
    let mut out = Vec::new();
    for f in files {
        for ann in read_annotations(&f)? {
            let path = root.join(&ann.raw_file);
            if !path.exists() {
                return Err(Error::MissingFile(path));
            }
            let (w, h) = image::image_dimensions(&path).map_err(|source| Error::Image { path, source })?;
            ann.validate(Some(w as f64)).map_err(|message| Error::Validation {
                line: 0,
                raw_file: ann.raw_file.clone(),
                message,
            })?;
            out.push(Sample {
                ann,
                frame_size: (w as usize, h as usize),
            });
        }
    }
    Ok(out)
}
