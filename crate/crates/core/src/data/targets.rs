//! Ground-truth maps at decoder resolution.

use crate::data::tusimple::ClipAnnotation;
use crate::error::{Error, Result};
use crate::network::Affine;

/// Decoder grid geometry: `transform` maps decoder pixels to frame pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetGrid {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub transform: Affine,
}

impl TargetGrid {
    /// Frame pixel to fractional cell coordinates `(col, row)`.
    pub fn to_cells(&self, x: f64, y: f64) -> (f64, f64) {
        let (u, v) = self.transform.invert(x, y);
        (u / self.stride as f64, v / self.stride as f64)
    }

    /// Fractional cell coordinates to frame pixels.
    pub fn to_frame(&self, col: f64, row: f64) -> (f64, f64) {
        self.transform.apply(col * self.stride as f64, row * self.stride as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTargets {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub confidence: Vec<f32>,
    /// `(dx, dy)` cell fractions, zero where confidence is 0.
    pub offsets: [Vec<f32>; 2],
    pub mask: Vec<f32>,
    /// 0 is background; lanes are numbered 1.. in annotation order.
    pub labels: Vec<u32>,
    /// Cells `(row, col)` of each labeled lane, ordered by row.
    pub lanes: Vec<Vec<(usize, usize)>>,
    /// Annotation points that fell outside the grid.
    pub dropped: usize,
}

impl TrainingTargets {
    pub fn empty(height: usize, width: usize, stride: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            stride,
            confidence: vec![0.0; n],
            offsets: [vec![0.0; n], vec![0.0; n]],
            mask: vec![0.0; n],
            labels: vec![0; n],
            lanes: Vec::new(),
            dropped: 0,
        }
    }

    pub fn marked(&self) -> usize {
        self.confidence.iter().filter(|&&c| c > 0.0).count()
    }

    /// Lane cells as `(row, x)` with x at the cell centre, in cell units.
    pub fn lane_cells(&self) -> Vec<Vec<(usize, f64)>> {
        self.lanes
            .iter()
            .map(|l| l.iter().map(|&(r, c)| (r, c as f64 + 0.5)).collect())
            .collect()
    }
}

/// One lane sample in fractional cell units.
#[derive(Clone, Copy)]
struct CellPoint {
    col: f64,
    row: f64,
    annotated: bool,
}

fn inside(p: &CellPoint, h: usize, w: usize) -> bool {
    p.col >= 0.0 && p.row >= 0.0 && p.col < w as f64 && p.row < h as f64
}

/// Rasterizes every lane: annotated points mark their cell with sub-cell
/// offsets, and rows between consecutive points are filled by linear
/// interpolation at the row centre. Each lane keeps at most one cell per row,
/// preferring the annotated point nearest the row centre.
pub fn rasterize_targets(ann: &ClipAnnotation, grid: &TargetGrid) -> Result<TrainingTargets> {
    ann.validate(None)
        .map_err(|m| Error::InvalidArgument(format!("{}: {m}", ann.raw_file)))?;
    let (h, w) = (grid.height, grid.width);
    let mut t = TrainingTargets::empty(h, w, grid.stride);
    for lane in 0..ann.lanes.len() {
        let pts: Vec<CellPoint> = ann
            .lane_points(lane)
            .into_iter()
            .map(|(x, y)| {
                let (col, row) = grid.to_cells(x, y);
                CellPoint {
                    col,
                    row,
                    annotated: true,
                }
            })
            .collect();
        t.dropped += pts.iter().filter(|p| !inside(p, h, w)).count();

        // row -> chosen point
        let mut per_row: Vec<Option<CellPoint>> = vec![None; h];
        let mut offer = |p: CellPoint| {
            if !inside(&p, h, w) {
                return;
            }
            let r = p.row as usize;
            let centre = |q: &CellPoint| (q.row - (r as f64 + 0.5)).abs();
            let better = match &per_row[r] {
                None => true,
                Some(q) => (p.annotated && !q.annotated) || (p.annotated == q.annotated && centre(&p) < centre(q)),
            };
            if better {
                per_row[r] = Some(p);
            }
        };
        for &p in &pts {
            offer(p);
        }
        for pair in pts.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (lo, hi) = (a.row.floor() as i64 + 1, b.row.floor() as i64);
            for r in lo.max(0)..hi.min(h as i64) {
                let y = r as f64 + 0.5;
                let s = (y - a.row) / (b.row - a.row);
                offer(CellPoint {
                    col: a.col + s * (b.col - a.col),
                    row: y,
                    annotated: false,
                });
            }
        }

        let label = t.lanes.len() as u32 + 1;
        let mut cells = Vec::new();
        for (r, p) in per_row.iter().enumerate() {
            let Some(p) = p else { continue };
            let c = p.col as usize;
            let i = r * w + c;
            cells.push((r, c));
            if t.labels[i] != 0 {
                continue;
            }
            t.confidence[i] = 1.0;
            t.mask[i] = 1.0;
            t.labels[i] = label;
            t.offsets[0][i] = (p.col - c as f64) as f32;
            t.offsets[1][i] = (p.row - r as f64) as f32;
        }
        if !cells.is_empty() {
            t.lanes.push(cells);
        }
    }
    Ok(t)
}
