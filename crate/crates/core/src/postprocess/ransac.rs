//! Robust quadratic fitting `x = a2·y² + a1·y + a0`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Coefficients `(a2, a1, a0)`.
pub type Quadratic = [f64; 3];

pub fn eval_quadratic(c: &Quadratic, y: f64) -> f64 {
    (c[0] * y + c[1]) * y + c[2]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacConfig {
    pub iters: usize,
    /// Horizontal inlier distance in pixels.
    pub inlier_tol: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iters: 100,
            inlier_tol: 2.0,
            min_inliers: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacFit {
    pub coeffs: Quadratic,
    /// Indices into the input, ascending.
    pub inliers: Vec<usize>,
    /// Consensus below `min_inliers`.
    pub low_confidence: bool,
}

/// Solves a 3×3 system by Gaussian elimination with partial pivoting.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..3 {
            let f = a[r][col] / a[col][col];
            for k in col..3 {
                a[r][k] -= f * a[col][k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let s: f64 = (r + 1..3).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// `y ↦ (y − shift)/scale` keeps the normal equations well conditioned.
#[derive(Clone, Copy)]
struct Normalizer {
    shift: f64,
    scale: f64,
}

impl Normalizer {
    fn new(points: &[(f64, f64)]) -> Self {
        let n = points.len().max(1) as f64;
        let shift = points.iter().map(|p| p.1).sum::<f64>() / n;
        let scale = points.iter().map(|p| (p.1 - shift).abs()).fold(0.0, f64::max).max(1e-9);
        Self { shift, scale }
    }

    /// Coefficients in normalized `t` back to raw `y`.
    fn denormalize(&self, c: [f64; 3]) -> Quadratic {
        let (s, k) = (self.shift, self.scale);
        let a2 = c[0] / (k * k);
        let a1 = c[1] / k - 2.0 * c[0] * s / (k * k);
        let a0 = c[0] * s * s / (k * k) - c[1] * s / k + c[2];
        [a2, a1, a0]
    }
}

fn distinct_rows(points: &[(f64, f64)]) -> usize {
    let mut ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    ys.len()
}

/// Least-squares quadratic over `(x, y)` points; falls back to a line with two
/// distinct rows. Fewer than two distinct rows cannot define `x = f(y)`.
pub fn least_squares_quadratic(points: &[(f64, f64)]) -> Result<Quadratic> {
    let rows = distinct_rows(points);
    if rows < 2 {
        return Err(Error::FitImpossible(format!("{rows} distinct rows")));
    }
    let nz = Normalizer::new(points);
    let degree = if rows >= 3 { 2 } else { 1 };
    // moments Σ t^k and Σ x·t^k
    let mut m = [0.0f64; 5];
    let mut r = [0.0f64; 3];
    for &(x, y) in points {
        let t = (y - nz.shift) / nz.scale;
        let mut tk = 1.0;
        for (k, mk) in m.iter_mut().enumerate() {
            *mk += tk;
            if k < 3 {
                r[k] += x * tk;
            }
            tk *= t;
        }
    }
    let c = if degree == 2 {
        let a = [[m[4], m[3], m[2]], [m[3], m[2], m[1]], [m[2], m[1], m[0]]];
        solve3(a, [r[2], r[1], r[0]])
    } else {
        let det = m[2] * m[0] - m[1] * m[1];
        (det.abs() > 1e-12).then(|| [0.0, (r[1] * m[0] - r[0] * m[1]) / det, (m[2] * r[0] - m[1] * r[1]) / det])
    }
    .ok_or_else(|| Error::FitImpossible("singular normal equations".into()))?;
    Ok(nz.denormalize(c))
}

/// Exact quadratic through three points with distinct rows.
pub fn interpolate_quadratic(p: [(f64, f64); 3]) -> Option<Quadratic> {
    let nz = Normalizer::new(&p);
    let t: Vec<f64> = p.iter().map(|q| (q.1 - nz.shift) / nz.scale).collect();
    let a = [[t[0] * t[0], t[0], 1.0], [t[1] * t[1], t[1], 1.0], [t[2] * t[2], t[2], 1.0]];
    solve3(a, [p[0].0, p[1].0, p[2].0]).map(|c| nz.denormalize(c))
}

fn inliers_of(points: &[(f64, f64)], c: &Quadratic, tol: f64) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, &(x, y))| (x - eval_quadratic(c, y)).abs() <= tol)
        .map(|(i, _)| i)
        .collect()
}

/// Samples minimal sets of three points, keeps the model with the largest
/// consensus (first found on ties), then refits by least squares on its inliers.
pub fn ransac_fit(points: &[(f64, f64)], cfg: &RansacConfig) -> Result<RansacFit> {
    if points.len() < 3 {
        return Err(Error::FitImpossible(format!("{} points, need at least 3", points.len())));
    }
    let rows = distinct_rows(points);
    if rows < 2 {
        return Err(Error::FitImpossible("all points share one row".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<Vec<usize>> = None;
    if rows >= 3 {
        for _ in 0..cfg.iters {
            let idx = sample(&mut rng, points.len(), 3);
            let s = [points[idx.index(0)], points[idx.index(1)], points[idx.index(2)]];
            if s[0].1 == s[1].1 || s[0].1 == s[2].1 || s[1].1 == s[2].1 {
                continue;
            }
            let Some(c) = interpolate_quadratic(s) else { continue };
            let inl = inliers_of(points, &c, cfg.inlier_tol);
            if best.as_ref().is_none_or(|b| inl.len() > b.len()) {
                best = Some(inl);
            }
        }
    }
    let inliers = match best {
        Some(b) if distinct_rows(&b.iter().map(|&i| points[i]).collect::<Vec<_>>()) >= 2 => b,
        _ => {
            // no usable minimal sample: fit everything and keep its consensus
            let c = least_squares_quadratic(points)?;
            inliers_of(points, &c, cfg.inlier_tol)
        }
    };
    let chosen: Vec<(f64, f64)> = inliers.iter().map(|&i| points[i]).collect();
    let coeffs = if distinct_rows(&chosen) >= 2 {
        least_squares_quadratic(&chosen)?
    } else {
        least_squares_quadratic(points)?
    };
    Ok(RansacFit {
        coeffs,
        low_confidence: inliers.len() < cfg.min_inliers,
        inliers,
    })
}
