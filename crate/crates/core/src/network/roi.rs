//! Fixed rectangular region of interest and the coordinate maps around it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::resample::crop_spatial;
use crate::real::Real;
use crate::tensor::Tensor;

/// Retained rectangle as fractions of frame width (`x`) and height (`y`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiBounds {
    pub x1: f64,
    pub x2: f64,
    pub y1: f64,
    pub y2: f64,
}

impl Default for RoiBounds {
    fn default() -> Self {
        Self {
            x1: 0.0,
            x2: 1.0,
            y1: 0.4,
            y2: 1.0,
        }
    }
}

/// Pixel window `rows.0..rows.1`, `cols.0..cols.1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl CropWindow {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            rows: (0, height),
            cols: (0, width),
        }
    }

    pub fn height(&self) -> usize {
        self.rows.1 - self.rows.0
    }

    pub fn width(&self) -> usize {
        self.cols.1 - self.cols.0
    }

    pub fn transform(&self) -> RoiTransform {
        RoiTransform {
            row_offset: self.rows.0,
            col_offset: self.cols.0,
        }
    }
}

// tolerate representation error such as 0.4 * 720 = 288.00000000000006
fn floor_px(v: f64) -> usize {
    (v + 1e-6).floor().max(0.0) as usize
}

fn ceil_px(v: f64) -> usize {
    (v - 1e-6).ceil().max(0.0) as usize
}

impl RoiBounds {
    pub fn full() -> Self {
        Self {
            x1: 0.0,
            x2: 1.0,
            y1: 0.0,
            y2: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |a: f64, b: f64| (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a < b;
        if ok(self.x1, self.x2) && ok(self.y1, self.y2) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "ROI bounds x [{}, {}], y [{}, {}] must satisfy 0 ≤ lo < hi ≤ 1",
                self.x1, self.x2, self.y1, self.y2
            )))
        }
    }

    pub fn is_full(&self) -> bool {
        *self == Self::full()
    }

    /// Exact pixel window: `floor(lo·extent) .. ceil(hi·extent)`.
    pub fn window(&self, height: usize, width: usize) -> Result<CropWindow> {
        self.validate()?;
        let rows = (floor_px(self.y1 * height as f64), ceil_px(self.y2 * height as f64).min(height));
        let cols = (floor_px(self.x1 * width as f64), ceil_px(self.x2 * width as f64).min(width));
        if rows.0 >= rows.1 || cols.0 >= cols.1 {
            return Err(Error::InvalidArgument(format!(
                "ROI selects an empty window of a {height}x{width} frame"
            )));
        }
        Ok(CropWindow { rows, cols })
    }

    /// The exact window grown towards the top/left until both extents are
    /// multiples of `multiple` (the encoder's total stride).
    pub fn aligned_window(&self, height: usize, width: usize, multiple: usize) -> Result<CropWindow> {
        let w = self.window(height, width)?;
        let grow = |(lo, hi): (usize, usize), extent: usize| -> Result<(usize, usize)> {
            let len = (hi - lo).div_ceil(multiple) * multiple;
            if len > extent {
                return Err(Error::InvalidArgument(format!(
                    "frame extent {extent} is not a multiple of {multiple}"
                )));
            }
            if hi >= len {
                Ok((hi - len, hi))
            } else {
                Ok((0, len))
            }
        };
        Ok(CropWindow {
            rows: grow(w.rows, height)?,
            cols: grow(w.cols, width)?,
        })
    }
}

/// Maps cropped pixel coordinates back to the source frame and vice versa.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct RoiTransform {
    pub row_offset: usize,
    pub col_offset: usize,
}

impl RoiTransform {
    pub fn is_identity(&self) -> bool {
        self.row_offset == 0 && self.col_offset == 0
    }

    pub fn to_full(&self, x: f64, y: f64) -> (f64, f64) {
        (x + self.col_offset as f64, y + self.row_offset as f64)
    }

    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        (x - self.col_offset as f64, y - self.row_offset as f64)
    }

    pub fn affine(&self) -> Affine {
        Affine {
            sx: 1.0,
            sy: 1.0,
            tx: self.col_offset as f64,
            ty: self.row_offset as f64,
        }
    }
}

pub fn roi_crop<R: Real>(frames: &Tensor<R>, bounds: &RoiBounds) -> Result<(Tensor<R>, RoiTransform)> {
    let [_, _, _, h, w] = frames.dims5("roi_crop")?;
    let window = bounds.window(h, w)?;
    roi_crop_window(frames, &window)
}

pub fn roi_crop_window<R: Real>(frames: &Tensor<R>, window: &CropWindow) -> Result<(Tensor<R>, RoiTransform)> {
    let [_, _, _, h, w] = frames.dims5("roi_crop")?;
    if window.rows == (0, h) && window.cols == (0, w) {
        return Ok((frames.clone(), RoiTransform::default()));
    }
    Ok((crop_spatial(frames, window.rows, window.cols)?, window.transform()))
}

/// Axis-aligned affine map `(u, v) ↦ (sx·u + tx, sy·v + ty)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub sx: f64,
    pub sy: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for Affine {
    fn default() -> Self {
        Self::identity()
    }
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            sx: 1.0,
            sy: 1.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        Self { sx, sy, tx: 0.0, ty: 0.0 }
    }

    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        (self.sx * u + self.tx, self.sy * v + self.ty)
    }

    pub fn invert(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.tx) / self.sx, (y - self.ty) / self.sy)
    }

    /// `outer ∘ self`.
    pub fn then(&self, outer: &Affine) -> Affine {
        Affine {
            sx: outer.sx * self.sx,
            sy: outer.sy * self.sy,
            tx: outer.sx * self.tx + outer.tx,
            ty: outer.sy * self.ty + outer.ty,
        }
    }
}
