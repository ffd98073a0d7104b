//! Synthetic clips in the TuSimple directory layout.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::tusimple::{serialize_tusimple, ClipAnnotation, ABSENT};
use crate::error::Result;

pub const FIXTURE_LABELS: &str = "label_data.json";

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureSpec {
    pub clips: usize,
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            clips: 4,
            frames: 5,
            width: 256,
            height: 128,
            seed: 7,
        }
    }
}

/// A lane as `x(y) = bottom + slope·(H−1−y) + bend·(H−1−y)²`.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticLane {
    pub bottom: f64,
    pub slope: f64,
    pub bend: f64,
}

impl SyntheticLane {
    pub fn x_at(&self, y: f64, height: u32) -> f64 {
        let d = height as f64 - 1.0 - y;
        self.bottom + self.slope * d + self.bend * d * d
    }
}

/// Lanes of one clip: 2 or 3 lanes sharing one curvature and converging toward
/// a point far above the frame, so neighbours stay well separated in the lower
/// part of the image.
pub fn clip_lanes(spec: &FixtureSpec, rng: &mut impl Rng) -> Vec<SyntheticLane> {
    let w = spec.width as f64;
    let h = spec.height as f64;
    let count = rng.random_range(2..=3usize);
    let vx = w * rng.random_range(0.45..0.55);
    let vy = -1.5 * h;
    let bend = rng.random_range(-1.0..1.0) * 1.5e-3 * w / h;
    let gap = w / (count as f64 + 1.0);
    (0..count)
        .map(|i| {
            let bottom = gap * (i as f64 + 1.0) + rng.random_range(-0.02..0.02) * w;
            SyntheticLane {
                bottom,
                slope: (vx - bottom) / (h - 1.0 - vy),
                bend,
            }
        })
        .collect()
}

/// Rows annotated in every fixture clip.
pub fn fixture_h_samples(height: u32) -> Vec<f64> {
    let top = (height as f64 * 0.3125).ceil() as u32;
    (top..height - 2).step_by(4).map(|y| y as f64).collect()
}

fn render(spec: &FixtureSpec, lanes: &[SyntheticLane], shift: f64, rng: &mut impl Rng) -> RgbImage {
    let (w, h) = (spec.width, spec.height);
    let horizon = h as f64 * 0.25;
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        let base = if (y as f64) < horizon { 150.0 } else { 55.0 + 25.0 * y as f64 / h as f64 };
        let xs: Vec<f64> = lanes.iter().map(|l| l.x_at(y as f64, h) + shift).collect();
        for x in 0..w {
            let mut v = base + rng.random_range(-8.0..8.0);
            if y as f64 >= horizon && xs.iter().any(|&lx| (x as f64 - lx).abs() <= 1.5) {
                v = 235.0;
            }
            let v = v.clamp(0.0, 255.0) as u8;
            img.put_pixel(x, y, Rgb([v, v, v]));
        }
    }
    img
}

/// Writes `clips/<i>/<k>.png` frames and a label file under `root`, returning
/// the annotations of the last frame of each clip.
pub fn generate_fixture(root: &Path, spec: &FixtureSpec) -> Result<Vec<ClipAnnotation>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let h_samples = fixture_h_samples(spec.height);
    let mut anns = Vec::with_capacity(spec.clips);
    for c in 0..spec.clips {
        let lanes = clip_lanes(spec, &mut rng);
        let drift = rng.random_range(-0.8..0.8);
        let dir = root.join("clips").join(c.to_string());
        fs::create_dir_all(&dir)?;
        for k in 1..=spec.frames {
            let shift = drift * (k as f64 - spec.frames as f64);
            let img = render(spec, &lanes, shift, &mut rng);
            let path = dir.join(format!("{k}.png"));
            img.save(&path).map_err(|source| crate::Error::Image { path, source })?;
        }
        let lane_xs = lanes
            .iter()
            .map(|l| {
                h_samples
                    .iter()
                    .map(|&y| {
                        let x = (l.x_at(y, spec.height) * 100.0).round() / 100.0;
                        if x >= 0.0 && x < spec.width as f64 {
                            x
                        } else {
                            ABSENT
                        }
                    })
                    .collect()
            })
            .collect();
        anns.push(ClipAnnotation::new(
            format!("clips/{c}/{}.png", spec.frames),
            h_samples.clone(),
            lane_xs,
        ));
    }
    fs::write(root.join(FIXTURE_LABELS), serialize_tusimple(&anns))?;
    Ok(anns)
}
