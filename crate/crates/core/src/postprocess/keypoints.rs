use crate::error::{Error, Result};
use crate::network::DecoderOutputs;

#[derive(Clone, Debug, PartialEq)]
pub struct Keypoint {
    /// Frame pixels.
    pub x: f64,
    pub y: f64,
    pub score: f32,
    /// Network-input pixels (before the frame mapping).
    pub u: f64,
    pub v: f64,
    pub embedding: Option<Vec<f32>>,
}

impl Keypoint {
    pub fn at(x: f64, y: f64, score: f32) -> Self {
        Self {
            x,
            y,
            score,
            u: x,
            v: y,
            embedding: None,
        }
    }
}

/// Neighbourhood a cell must dominate to become a keypoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NmsWindow {
    /// Left and right neighbours only.
    Row,
    /// Full 3×3 neighbourhood.
    Square,
}

impl NmsWindow {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "row" => Ok(Self::Row),
            "square" => Ok(Self::Square),
            _ => Err(Error::InvalidArgument(format!("unknown NMS window {s:?} (row | square)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Row => "row",
            Self::Square => "square",
        }
    }
}

/// Whether cell `(r, c)` is a local maximum. Ties are broken in raster order:
/// an equal neighbour earlier in the scan suppresses the cell.
pub fn is_local_max(conf: &[f32], h: usize, w: usize, r: usize, c: usize, window: NmsWindow) -> bool {
    let p = conf[r * w + c];
    let rows: &[i64] = match window {
        NmsWindow::Row => &[0],
        NmsWindow::Square => &[-1, 0, 1],
    };
    for &dr in rows {
        for dc in [-1i64, 0, 1] {
            if dr == 0 && dc == 0 {
                continue;
            }
            let (rr, cc) = (r as i64 + dr, c as i64 + dc);
            if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                continue;
            }
            let q = conf[rr as usize * w + cc as usize];
            let earlier = (dr, dc) < (0, 0);
            if q > p || (q == p && earlier) {
                return false;
            }
        }
    }
    true
}

/// Local maxima with score ≥ `threshold`, refined by offsets when present
/// (cell centres otherwise) and mapped to frame pixels.
pub fn extract_keypoints(out: &DecoderOutputs, threshold: f64, window: NmsWindow) -> Result<Vec<Keypoint>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("keypoint threshold {threshold} outside (0, 1)")));
    }
    let (h, w) = (out.height, out.width);
    let stride = out.stride as f64;
    let mut pts = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let score = out.confidence[i];
            if (score as f64) < threshold || !is_local_max(&out.confidence, h, w, r, c, window) {
                continue;
            }
            let (dx, dy) = match &out.offsets {
                Some([ox, oy]) => (ox[i] as f64, oy[i] as f64),
                None => (0.5, 0.5),
            };
            let (u, v) = ((c as f64 + dx) * stride, (r as f64 + dy) * stride);
            let (x, y) = out.transform.apply(u, v);
            pts.push(Keypoint {
                x,
                y,
                score,
                u,
                v,
                embedding: out.embedding(r, c),
            });
        }
    }
    Ok(pts)
}
