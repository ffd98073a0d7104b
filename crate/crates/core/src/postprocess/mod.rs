//! Decoder maps to lane instances: keypoints, clustering, RANSAC fitting and
//! graph smoothing.

pub mod cluster;
pub mod keypoints;
pub mod ransac;
pub mod smooth;

use rayon::prelude::*;

pub use cluster::{cluster_indices, UnionFind};
pub use keypoints::{extract_keypoints, Keypoint, NmsWindow};
pub use ransac::{eval_quadratic, least_squares_quadratic, ransac_fit, Quadratic, RansacConfig, RansacFit};
pub use smooth::{brute_force_path, shortest_path, SmoothingGraph};

use crate::data::tusimple::{ClipAnnotation, ABSENT};
use crate::error::{Error, Result};
use crate::network::DecoderOutputs;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LaneFlags {
    /// RANSAC consensus below the configured minimum.
    pub low_confidence: bool,
    /// Smoothing graph had an empty layer; points left as fitted.
    pub disconnected: bool,
    /// The smoothed chain was rougher than the raw one and was discarded.
    pub smoothing_rejected: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaneInstance {
    /// Ordered by increasing y.
    pub points: Vec<Keypoint>,
    pub coeffs: Option<Quadratic>,
    pub inlier_count: usize,
    pub flags: LaneFlags,
}

impl LaneInstance {
    pub fn unfitted(mut points: Vec<Keypoint>) -> Self {
        points.sort_by(|a, b| a.y.total_cmp(&b.y).then(a.x.total_cmp(&b.x)));
        Self {
            points,
            coeffs: None,
            inlier_count: 0,
            flags: LaneFlags::default(),
        }
    }

    pub fn xy(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.x, p.y)).collect()
    }

    pub fn x_at(&self, y: f64) -> Option<f64> {
        self.coeffs.map(|c| eval_quadratic(&c, y))
    }

    pub fn y_span(&self) -> Option<(f64, f64)> {
        Some((self.points.first()?.y, self.points.last()?.y))
    }

    pub fn confidence(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        self.points.iter().map(|p| p.score as f64).sum::<f64>() / self.points.len() as f64
    }
}

/// Single-linkage clustering; instances with fewer than `min_size` points are dropped.
pub fn cluster_lanes(points: &[Keypoint], dist_threshold: f64, embed_weight: f64, min_size: usize) -> Result<Vec<LaneInstance>> {
    if !(dist_threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("cluster threshold {dist_threshold} must be > 0")));
    }
    Ok(cluster_indices(points, dist_threshold, embed_weight, min_size)
        .into_iter()
        .map(|g| LaneInstance::unfitted(g.into_iter().map(|i| points[i].clone()).collect()))
        .collect())
}

/// Groups points into rows of equal y (input sorted by y).
fn rows_of(points: &[Keypoint]) -> Vec<Vec<&Keypoint>> {
    let mut rows: Vec<Vec<&Keypoint>> = Vec::new();
    for p in points {
        match rows.last_mut() {
            Some(r) if r[0].y == p.y => r.push(p),
            _ => rows.push(vec![p]),
        }
    }
    rows
}

/// Replaces each row of a fitted instance by the minimum-weight chain through
/// per-row candidates: each raw point, its projection onto the fitted curve and
/// their midpoint. The chain is kept only if it is no rougher than the raw
/// chain (strongest raw point per row); the curve is then refitted.
pub fn graph_smooth(instance: &LaneInstance, lambda: f64) -> LaneInstance {
    let mut out = instance.clone();
    let Some(coeffs) = instance.coeffs else {
        out.flags.disconnected = true;
        return out;
    };
    let rows = rows_of(&instance.points);
    if rows.len() < 2 {
        out.flags.disconnected = true;
        return out;
    }
    let mut layers = Vec::with_capacity(rows.len());
    let mut raw_choice = Vec::with_capacity(rows.len());
    for row in &rows {
        let y = row[0].y;
        let fx = eval_quadratic(&coeffs, y);
        let mut cand = Vec::new();
        for p in row {
            cand.push((p.x, y));
        }
        cand.push((fx, y));
        for p in row {
            cand.push(((p.x + fx) / 2.0, y));
        }
        let strongest = (0..row.len())
            .max_by(|&a, &b| row[a].score.total_cmp(&row[b].score).then(b.cmp(&a)))
            .unwrap_or(0);
        raw_choice.push(strongest);
        layers.push(cand);
    }
    let graph = SmoothingGraph::new(layers, lambda);
    let Some((path, _)) = shortest_path(&graph) else {
        out.flags.disconnected = true;
        return out;
    };
    let xs = |choice: &[usize]| -> Vec<f64> { choice.iter().enumerate().map(|(l, &i)| graph.layers[l][i].0).collect() };
    let use_raw = smooth::max_second_difference(&xs(&path)) > smooth::max_second_difference(&xs(&raw_choice));
    out.flags.smoothing_rejected = use_raw;
    let chosen = if use_raw { &raw_choice } else { &path };
    out.points = rows
        .iter()
        .zip(chosen)
        .enumerate()
        .map(|(l, (row, &i))| {
            let (x, y) = graph.layers[l][i];
            let best = row.iter().max_by(|a, b| a.score.total_cmp(&b.score)).expect("non-empty row");
            Keypoint { x, y, ..(*best).clone() }
        })
        .collect();
    if let Ok(c) = least_squares_quadratic(&out.xy()) {
        out.coeffs = Some(c);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostprocessConfig {
    pub threshold: f64,
    pub nms: NmsWindow,
    /// Clustering distance in network-input pixels.
    pub cluster_px: f64,
    pub embed_weight: f64,
    pub min_points: usize,
    /// RANSAC settings; `inlier_tol` is in network-input pixels.
    pub ransac: RansacConfig,
    pub lambda: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            threshold: 0.4,
            nms: NmsWindow::Row,
            cluster_px: 12.0,
            embed_weight: 10.0,
            min_points: 3,
            ransac: RansacConfig::default(),
            lambda: smooth::DEFAULT_LAMBDA,
        }
    }
}

/// Keypoints → clusters → RANSAC → smoothing. Instances whose fit fails or
/// lacks consensus are dropped; nothing here aborts.
pub fn postprocess_pipeline(out: &DecoderOutputs, cfg: &PostprocessConfig) -> Result<Vec<LaneInstance>> {
    let points = extract_keypoints(out, cfg.threshold, cfg.nms)?;
    let clusters = cluster_lanes(&points, cfg.cluster_px, cfg.embed_weight, cfg.min_points)?;
    let tol = cfg.ransac.inlier_tol * out.transform.sx;
    let mut lanes: Vec<LaneInstance> = clusters
        .into_par_iter()
        .enumerate()
        .filter_map(|(k, inst)| {
            let rc = RansacConfig {
                inlier_tol: tol,
                seed: cfg.ransac.seed.wrapping_add(k as u64),
                ..cfg.ransac
            };
            let fit = ransac_fit(&inst.xy(), &rc).ok()?;
            if fit.low_confidence {
                return None;
            }
            let fitted = LaneInstance {
                points: fit.inliers.iter().map(|&i| inst.points[i].clone()).collect(),
                coeffs: Some(fit.coeffs),
                inlier_count: fit.inliers.len(),
                flags: LaneFlags::default(),
            };
            Some(graph_smooth(&fitted, cfg.lambda))
        })
        .collect();
    lanes.sort_by(|a, b| {
        let key = |l: &LaneInstance| l.y_span().and_then(|(_, y1)| l.x_at(y1)).unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b))
    });
    Ok(lanes)
}

/// Samples fitted lanes on `h_samples` rows within each lane's y span widened
/// by `margin`; rows outside the span or the frame width are absent.
pub fn lanes_to_annotation(
    lanes: &[LaneInstance],
    h_samples: &[f64],
    frame_width: usize,
    margin: f64,
    raw_file: &str,
) -> ClipAnnotation {
    let rows = lanes
        .iter()
        .filter_map(|l| {
            let (y0, y1) = l.y_span()?;
            l.coeffs?;
            Some(
                h_samples
                    .iter()
                    .map(|&y| {
                        let x = l.x_at(y).unwrap_or(ABSENT);
                        if y >= y0 - margin && y <= y1 + margin && x >= 0.0 && x < frame_width as f64 {
                            x
                        } else {
                            ABSENT
                        }
                    })
                    .collect(),
            )
        })
        .collect();
    ClipAnnotation::new(raw_file, h_samples.to_vec(), rows)
}
