//! Lane overlays and loss-curve plots on RGB images.

use image::{Rgb, RgbImage};
use lane3d::data::{ClipAnnotation, ABSENT};

/// Lane `i` is drawn in `PALETTE[i % PALETTE.len()]`.
pub const PALETTE: [[u8; 3]; 8] = [
    [255, 64, 64],
    [64, 220, 64],
    [64, 128, 255],
    [255, 200, 0],
    [255, 0, 255],
    [0, 230, 230],
    [255, 128, 0],
    [160, 96, 255],
];

/// Pixels whose centre lies within this distance of a lane segment are painted
/// (a 3 px wide stroke).
pub const STROKE_RADIUS: f64 = 1.5;

pub fn palette_color(i: usize) -> Rgb<u8> {
    Rgb(PALETTE[i % PALETTE.len()])
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Paints every pixel within `radius` of the segment `a–b`.
pub fn draw_segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), radius: f64, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = (a.0.min(b.0) - radius).floor().max(0.0) as i64;
    let x1 = ((a.0.max(b.0) + radius).ceil() as i64).min(w - 1);
    let y0 = (a.1.min(b.1) - radius).floor().max(0.0) as i64;
    let y1 = ((a.1.max(b.1) + radius).ceil() as i64).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if segment_distance((x as f64, y as f64), a, b) <= radius {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

/// Present points of a lane split into runs of consecutive rows.
pub fn lane_runs(ann: &ClipAnnotation, lane: usize) -> Vec<Vec<(f64, f64)>> {
    let mut runs = Vec::new();
    let mut cur: Vec<(f64, f64)> = Vec::new();
    for (&x, &y) in ann.lanes[lane].iter().zip(&ann.h_samples) {
        if x == ABSENT || x < 0.0 {
            if !cur.is_empty() {
                runs.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push((x, y));
        }
    }
    if !cur.is_empty() {
        runs.push(cur);
    }
    runs
}

/// Draws each lane as a polyline in its palette colour. Annotation coordinates
/// are scaled from `source_size` (the labelled frame) to the image.
pub fn overlay_lanes(img: &RgbImage, ann: &ClipAnnotation, source_size: (u32, u32)) -> RgbImage {
    let mut out = img.clone();
    let sx = img.width() as f64 / source_size.0 as f64;
    let sy = img.height() as f64 / source_size.1 as f64;
    for lane in 0..ann.lanes.len() {
        let color = palette_color(lane);
        for run in lane_runs(ann, lane) {
            let pts: Vec<(f64, f64)> = run.iter().map(|&(x, y)| (x * sx, y * sy)).collect();
            if pts.len() == 1 {
                draw_segment(&mut out, pts[0], pts[0], STROKE_RADIUS, color);
            }
            for w in pts.windows(2) {
                draw_segment(&mut out, w[0], w[1], STROKE_RADIUS, color);
            }
        }
    }
    out
}

/// Places `left` and `right` next to each other with a 4 px white gap.
pub fn side_by_side(left: &RgbImage, right: &RgbImage) -> RgbImage {
    const GAP: u32 = 4;
    let w = left.width() + GAP + right.width();
    let h = left.height().max(right.height());
    let mut out = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    image::imageops::replace(&mut out, left, 0, 0);
    image::imageops::replace(&mut out, right, (left.width() + GAP) as i64, 0);
    out
}

/// One named loss column parsed from a training log.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    /// `(step, value)`; rows where the term is absent are skipped.
    pub points: Vec<(f64, f64)>,
}

/// Parses a tab-separated loss log whose first column is the step.
pub fn parse_loss_log(text: &str) -> Result<Vec<Series>, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("empty loss log")?;
    let names: Vec<&str> = header.split('\t').collect();
    if names.len() < 2 || names[0] != "step" {
        return Err(format!("unexpected loss log header `{header}`"));
    }
    let mut series: Vec<Series> = names[1..]
        .iter()
        .map(|n| Series {
            name: n.to_string(),
            points: Vec::new(),
        })
        .collect();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != names.len() {
            return Err(format!("log row {}: {} columns, header has {}", i + 2, cells.len(), names.len()));
        }
        let step: f64 = cells[0].parse().map_err(|_| format!("log row {}: bad step `{}`", i + 2, cells[0]))?;
        for (s, cell) in series.iter_mut().zip(&cells[1..]) {
            if *cell == "-" {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| format!("log row {}: bad value `{cell}`", i + 2))?;
            s.points.push((step, v));
        }
    }
    Ok(series)
}

/// Log-scale loss curves, one palette colour per series in column order, on
/// a white canvas with plain axes.
pub fn plot_loss_curves(series: &[Series], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (l, r, t, b) = (40.0, width as f64 - 10.0, 10.0, height as f64 - 30.0);
    let axis = Rgb([0, 0, 0]);
    draw_segment(&mut img, (l, t), (l, b), 0.5, axis);
    draw_segment(&mut img, (l, b), (r, b), 0.5, axis);
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|&(_, v)| v > 0.0 && v.is_finite())
        .collect();
    if finite.is_empty() {
        return img;
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, g: fn(&(f64, f64)) -> f64| finite.iter().map(g).fold(init, f);
    let (s0, s1) = (fold(f64::min, f64::INFINITY, |p| p.0), fold(f64::max, f64::NEG_INFINITY, |p| p.0));
    let (v0, v1) = (
        fold(f64::min, f64::INFINITY, |p| p.1.log10()),
        fold(f64::max, f64::NEG_INFINITY, |p| p.1.log10()),
    );
    let span = |a: f64, b: f64| if b > a { b - a } else { 1.0 };
    let map = |(s, v): (f64, f64)| {
        let x = l + (s - s0) / span(s0, s1) * (r - l);
        let y = b - (v.log10() - v0) / span(v0, v1) * (b - t);
        (x, y)
    };
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = s.points.iter().copied().filter(|&(_, v)| v > 0.0 && v.is_finite()).map(map).collect();
        let color = palette_color(i);
        if pts.len() == 1 {
            draw_segment(&mut img, pts[0], pts[0], 1.5, color);
        }
        for w in pts.windows(2) {
            draw_segment(&mut img, w[0], w[1], 1.0, color);
        }
    }
    img
}
