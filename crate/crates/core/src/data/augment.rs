//! Training-time augmentation applied jointly to frames and lane annotations.

use image::{Rgb, Rgb32FImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::tusimple::{is_present, ClipAnnotation, ABSENT};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Brightness shift drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    pub noise_sigma: f64,
    /// Rotation drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            brightness: 0.2,
            noise_sigma: 0.02,
            rotation_deg: 3.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            brightness: 0.0,
            noise_sigma: 0.0,
            rotation_deg: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::InvalidArgument(format!("flip probability {}", self.flip_prob)));
        }
        if !(self.noise_sigma >= 0.0 && self.brightness >= 0.0 && self.rotation_deg >= 0.0) {
            return Err(Error::InvalidArgument("augmentation ranges must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Parameters drawn for one clip; every frame of the clip shares them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub angle_deg: f64,
    pub brightness: f64,
}

impl AugmentDraw {
    fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let flip = cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob;
        let angle_deg = if cfg.rotation_deg > 0.0 {
            rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg)
        } else {
            0.0
        };
        let brightness = if cfg.brightness > 0.0 {
            rng.random_range(-cfg.brightness..=cfg.brightness)
        } else {
            0.0
        };
        Self {
            flip,
            angle_deg,
            brightness,
        }
    }
}

pub fn flip_frame(img: &Rgb32FImage) -> Rgb32FImage {
    image::imageops::flip_horizontal(img)
}

/// `x ↦ W − 1 − x` on present points.
pub fn flip_annotation(ann: &ClipAnnotation, width: u32) -> ClipAnnotation {
    let mut out = ann.clone();
    for lane in &mut out.lanes {
        for x in lane.iter_mut().filter(|x| is_present(**x)) {
            *x = width as f64 - 1.0 - *x;
        }
    }
    out
}

fn rotate_point(x: f64, y: f64, cx: f64, cy: f64, cos: f64, sin: f64) -> (f64, f64) {
    let (dx, dy) = (x - cx, y - cy);
    (cx + cos * dx - sin * dy, cy + sin * dx + cos * dy)
}

/// Rotates about the frame centre with bilinear sampling; uncovered pixels are 0.
pub fn rotate_frame(img: &Rgb32FImage, angle_deg: f64) -> Rgb32FImage {
    let (w, h) = img.dimensions();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    Rgb32FImage::from_fn(w, h, |x, y| {
        // inverse rotation of the destination pixel
        let (sx, sy) = rotate_point(x as f64, y as f64, cx, cy, cos, -sin);
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
        let mut acc = [0.0f32; 3];
        for (ox, oy, wgt) in [
            (0, 0, (1.0 - fx) * (1.0 - fy)),
            (1, 0, fx * (1.0 - fy)),
            (0, 1, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ] {
            let (px, py) = (x0 as i64 + ox, y0 as i64 + oy);
            if wgt == 0.0 || px < 0 || py < 0 || px >= w as i64 || py >= h as i64 {
                continue;
            }
            let p = img.get_pixel(px as u32, py as u32);
            for c in 0..3 {
                acc[c] += wgt * p[c];
            }
        }
        Rgb(acc)
    })
}

/// Rotates lane polylines and resamples them on the original rows. Rows outside
/// the rotated span or points leaving the frame become absent.
pub fn rotate_annotation(ann: &ClipAnnotation, width: u32, height: u32, angle_deg: f64) -> ClipAnnotation {
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut out = ann.clone();
    for (li, lane) in out.lanes.iter_mut().enumerate() {
        let pts: Vec<(f64, f64)> = ann
            .lane_points(li)
            .into_iter()
            .map(|(x, y)| rotate_point(x, y, cx, cy, cos, sin))
            .collect();
        for (x, &y) in lane.iter_mut().zip(&ann.h_samples) {
            *x = ABSENT;
            if pts.len() == 1 && (pts[0].1 - y).abs() < 1e-9 {
                *x = pts[0].0;
            }
            for seg in pts.windows(2) {
                let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
                let (lo, hi) = if y0 <= y1 { (y0, y1) } else { (y1, y0) };
                if y >= lo && y <= hi && hi > lo {
                    *x = x0 + (y - y0) / (y1 - y0) * (x1 - x0);
                    break;
                }
            }
            if !(*x >= 0.0 && *x < width as f64) {
                *x = ABSENT;
            }
        }
    }
    out
}

/// Adds `delta` then zero-mean Gaussian noise, clamping to `[0, 1]`.
pub fn photometric(img: &mut Rgb32FImage, delta: f64, sigma: f64, rng: &mut impl Rng) {
    let normal = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("σ ≥ 0"));
    for v in img.iter_mut() {
        let mut x = *v as f64 + delta;
        if let Some(n) = &normal {
            x += n.sample(rng);
        }
        *v = x.clamp(0.0, 1.0) as f32;
    }
}

/// Applies one draw to every frame of a clip and to its annotation.
pub fn augment(frames: &[Rgb32FImage], ann: &ClipAnnotation, cfg: &AugmentConfig) -> Result<(Vec<Rgb32FImage>, ClipAnnotation, AugmentDraw)> {
    cfg.validate()?;
    let Some(first) = frames.first() else {
        return Err(Error::InvalidArgument("augment needs at least one frame".into()));
    };
    let (w, h) = first.dimensions();
    if frames.iter().any(|f| f.dimensions() != (w, h)) {
        return Err(Error::InvalidArgument("frames of a clip differ in size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draw = AugmentDraw::sample(cfg, &mut rng);
    let mut ann = ann.clone();
    if draw.flip {
        ann = flip_annotation(&ann, w);
    }
    if draw.angle_deg != 0.0 {
        ann = rotate_annotation(&ann, w, h, draw.angle_deg);
    }
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let mut img = if draw.flip { flip_frame(f) } else { f.clone() };
        if draw.angle_deg != 0.0 {
            img = rotate_frame(&img, draw.angle_deg);
        }
        if draw.brightness != 0.0 || cfg.noise_sigma > 0.0 {
            photometric(&mut img, draw.brightness, cfg.noise_sigma, &mut rng);
        }
        out.push(img);
    }
    Ok((out, ann, draw))
}
