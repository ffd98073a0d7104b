//! Training objectives and their tape operations.
//!
//! Each loss has a plain evaluation (used as the reference in tests), an
//! analytic gradient, and a tape op wrapping both.

use crate::data::targets::TrainingTargets;
use crate::error::{Error, Result};
use crate::network::{ForwardOutput, Variant};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;

/// Which terms make up the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossForm {
    /// Network 1: focal + offset + embedding. Network 2: focal + LineIoU.
    PerVariant,
    /// Focal + offset + LineIoU regardless of variant.
    Combined,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub w_focal: f64,
    pub w_offset: f64,
    pub w_lineiou: f64,
    pub w_embed: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// LineIoU segment half-width in decoder cells.
    pub lineiou_e: f64,
    /// Cells on each side of the target used for the soft x estimate.
    pub lineiou_window: usize,
    pub delta_pull: f64,
    pub delta_push: f64,
    pub form: LossForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_focal: 1.0,
            w_offset: 1.0,
            w_lineiou: 1.0,
            w_embed: 0.5,
            alpha: 0.25,
            gamma: 2.0,
            lineiou_e: 7.5,
            lineiou_window: 3,
            delta_pull: 0.5,
            delta_push: 3.0,
            form: LossForm::PerVariant,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_focal, self.w_offset, self.w_lineiou, self.w_embed, self.alpha];
        if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("loss weights and alpha must be finite and ≥ 0".into()));
        }
        if !(self.gamma >= 0.0) || !(self.lineiou_e > 0.0) {
            return Err(Error::InvalidArgument("need gamma ≥ 0 and e > 0".into()));
        }
        if !(self.delta_pull >= 0.0 && self.delta_push > self.delta_pull) {
            return Err(Error::InvalidArgument("need delta_push > delta_pull ≥ 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- focal

/// Per-cell focal loss and its derivative with respect to `p`.
pub fn focal_term(p: f64, target: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let positive = target >= 0.5;
    let pt = if positive { pc } else { 1.0 - pc };
    let q = 1.0 - pt;
    let loss = -alpha * q.powf(gamma) * pt.ln();
    if pc != p {
        return (loss, 0.0);
    }
    let mut d_pt = -alpha * q.powf(gamma) / pt;
    if gamma > 0.0 {
        d_pt += alpha * gamma * q.powf(gamma - 1.0) * pt.ln();
    }
    (loss, if positive { d_pt } else { -d_pt })
}

fn check_binary(target: &[f32]) -> Result<()> {
    if target.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::InvalidArgument("focal targets must be 0 or 1".into()));
    }
    Ok(())
}

/// Mean over cells of `−α(1−p_t)^γ log p_t`.
pub fn focal_loss<R: Real>(pred: &[R], target: &[f32], alpha: f64, gamma: f64) -> Result<f64> {
    Ok(focal_loss_with_grad(pred, target, alpha, gamma)?.0)
}

pub fn focal_loss_with_grad<R: Real>(pred: &[R], target: &[f32], alpha: f64, gamma: f64) -> Result<(f64, Vec<R>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape(
            "focal_loss",
            format!("{} predictions vs {} targets", pred.len(), target.len()),
        ));
    }
    check_binary(target)?;
    let inv = 1.0 / pred.len() as f64;
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let (l, d) = focal_term(p.as_f64(), t as f64, alpha, gamma);
            total += l;
            R::lit(d * inv)
        })
        .collect();
    Ok((total * inv, grad))
}

// ---------------------------------------------------------------- offset

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OffsetLoss {
    pub value: f64,
    pub valid: usize,
    /// Set when no cell was valid; `value` is then 0.
    pub empty: bool,
}

/// `(1/N)·Σ_valid (Δx² + Δy²)`; `pred`/`target` are `[batch, 2, plane]`, `mask` is `[batch, plane]`.
pub fn offset_loss_with_grad<R: Real>(
    pred: &[R],
    target: &[f32],
    mask: &[f32],
    plane: usize,
) -> Result<(OffsetLoss, Vec<R>)> {
    if pred.len() != target.len() || pred.len() != 2 * mask.len() || plane == 0 || mask.len() % plane != 0 {
        return Err(Error::shape(
            "offset_loss",
            format!("pred {}, target {}, mask {}, plane {plane}", pred.len(), target.len(), mask.len()),
        ));
    }
    let batch = mask.len() / plane;
    let valid = mask.iter().filter(|&&m| m > 0.0).count();
    let mut grad = vec![R::zero(); pred.len()];
    if valid == 0 {
        return Ok((
            OffsetLoss {
                value: 0.0,
                valid: 0,
                empty: true,
            },
            grad,
        ));
    }
    let inv = 1.0 / valid as f64;
    let mut total = 0.0;
    for b in 0..batch {
        for i in 0..plane {
            if mask[b * plane + i] <= 0.0 {
                continue;
            }
            for c in 0..2 {
                let k = (b * 2 + c) * plane + i;
                let d = pred[k].as_f64() - target[k] as f64;
                total += d * d;
                grad[k] = R::lit(2.0 * d * inv);
            }
        }
    }
    Ok((
        OffsetLoss {
            value: total * inv,
            valid,
            empty: false,
        },
        grad,
    ))
}

pub fn offset_loss<R: Real>(pred: &[R], target: &[f32], mask: &[f32], plane: usize) -> Result<OffsetLoss> {
    Ok(offset_loss_with_grad(pred, target, mask, plane)?.0)
}

// ---------------------------------------------------------------- LineIoU

/// Intersection and union of `[a−e, a+e]` and `[b−e, b+e]` with `|a−b| = d`.
pub fn segment_overlap(d: f64, e: f64) -> (f64, f64) {
    let inter = (2.0 * e - d.abs()).max(0.0);
    (inter, 4.0 * e - inter)
}

/// Rows where either lane is `None` are skipped; no shared rows gives 0.
pub fn line_iou(pred: &[Option<f64>], gt: &[Option<f64>], e: f64) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        if let (Some(p), Some(g)) = (p, g) {
            let (i, u) = segment_overlap(p - g, e);
            inter += i;
            union += u;
        }
    }
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn line_iou_loss(pred: &[Option<f64>], gt: &[Option<f64>], e: f64) -> f64 {
    1.0 - line_iou(pred, gt, e)
}

/// Soft horizontal position on one row of a confidence map: confidence-weighted
/// mean of cell centres within `window` cells of `anchor`. Returns the position,
/// the weight sum and the column range.
fn soft_position<R: Real>(row: &[R], anchor: f64, window: usize) -> (f64, f64, usize, usize) {
    let w = row.len();
    let c = (anchor.floor().max(0.0) as usize).min(w - 1);
    let lo = c.saturating_sub(window);
    let hi = (c + window + 1).min(w);
    let mut s = 0.0;
    let mut sx = 0.0;
    for (j, &p) in row.iter().enumerate().take(hi).skip(lo) {
        s += p.as_f64();
        sx += p.as_f64() * (j as f64 + 0.5);
    }
    (sx / s.max(1e-12), s, lo, hi)
}

/// Batch-mean `1 − LineIoU` between soft row positions read from the confidence
/// map and the target lanes (`(row, x)` in cell units, per image). Images without
/// lane rows are excluded from the mean.
pub fn lineiou_map_loss_with_grad<R: Real>(
    conf: &[R],
    height: usize,
    width: usize,
    lanes: &[Vec<Vec<(usize, f64)>>],
    e: f64,
    window: usize,
) -> Result<(f64, Vec<R>)> {
    let plane = height * width;
    if plane == 0 || conf.len() != lanes.len() * plane {
        return Err(Error::shape(
            "lineiou_loss",
            format!("{} confidences for {} images of {height}x{width}", conf.len(), lanes.len()),
        ));
    }
    let mut grad = vec![R::zero(); conf.len()];
    let counted = lanes.iter().filter(|l| l.iter().any(|r| !r.is_empty())).count();
    if counted == 0 {
        return Ok((0.0, grad));
    }
    let inv_b = 1.0 / counted as f64;
    let mut total = 0.0;
    for (b, image_lanes) in lanes.iter().enumerate() {
        struct RowTerm {
            offset: usize,
            lo: usize,
            hi: usize,
            x: f64,
            s: f64,
            d: f64,
        }
        let mut terms = Vec::new();
        let (mut inter, mut union) = (0.0, 0.0);
        for lane in image_lanes {
            for &(r, gx) in lane {
                if r >= height {
                    return Err(Error::InvalidArgument(format!("lane row {r} outside {height} rows")));
                }
                let offset = b * plane + r * width;
                let (x, s, lo, hi) = soft_position(&conf[offset..offset + width], gx, window);
                let d = x - gx;
                let (i, u) = segment_overlap(d, e);
                inter += i;
                union += u;
                terms.push(RowTerm { offset, lo, hi, x, s, d });
            }
        }
        if terms.is_empty() {
            continue;
        }
        total += (1.0 - inter / union) * inv_b;
        for t in terms {
            if t.d.abs() >= 2.0 * e || t.d == 0.0 || t.s <= 1e-12 {
                continue;
            }
            let sg = t.d.signum();
            // dI/dx = −sign(d), dU/dx = +sign(d)
            let d_iou = (-sg * union - inter * sg) / (union * union);
            let d_loss_dx = -d_iou * inv_b;
            for j in t.lo..t.hi {
                let dx_dp = (j as f64 + 0.5 - t.x) / t.s;
                grad[t.offset + j] += R::lit(d_loss_dx * dx_dp);
            }
        }
    }
    Ok((total, grad))
}

// ---------------------------------------------------------------- embedding

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EmbeddingLoss {
    pub pull: f64,
    pub push: f64,
}

impl EmbeddingLoss {
    pub fn total(&self) -> f64 {
        self.pull + self.push
    }
}

/// Discriminative pull/push loss averaged over the batch. `emb` is
/// `[batch, dim, plane]`; `labels` is `[batch, plane]` with 0 as background.
pub fn embedding_loss_with_grad<R: Real>(
    emb: &[R],
    labels: &[u32],
    dim: usize,
    plane: usize,
    delta_pull: f64,
    delta_push: f64,
) -> Result<(EmbeddingLoss, Vec<R>)> {
    if dim == 0 || plane == 0 || labels.len() % plane != 0 || emb.len() != labels.len() * dim {
        return Err(Error::shape(
            "embedding_loss",
            format!("{} embeddings, {} labels, dim {dim}, plane {plane}", emb.len(), labels.len()),
        ));
    }
    let batch = labels.len() / plane;
    let mut grad = vec![R::zero(); emb.len()];
    let mut out = EmbeddingLoss::default();
    let inv_b = 1.0 / batch as f64;
    for b in 0..batch {
        let lab = &labels[b * plane..(b + 1) * plane];
        let base = b * dim * plane;
        let at = |i: usize, c: usize| emb[base + c * plane + i].as_f64();
        let k = lab.iter().copied().max().unwrap_or(0) as usize;
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &l) in lab.iter().enumerate() {
            if l > 0 {
                members[l as usize - 1].push(i);
            }
        }
        members.retain(|m| !m.is_empty());
        let k = members.len();
        if k == 0 {
            continue;
        }
        let means: Vec<Vec<f64>> = members
            .iter()
            .map(|m| (0..dim).map(|c| m.iter().map(|&i| at(i, c)).sum::<f64>() / m.len() as f64).collect())
            .collect();
        let mut g_mean = vec![vec![0.0; dim]; k];
        let inv_k = 1.0 / k as f64;
        for (ci, m) in members.iter().enumerate() {
            let inv_n = 1.0 / m.len() as f64;
            for &i in m {
                let r: Vec<f64> = (0..dim).map(|c| means[ci][c] - at(i, c)).collect();
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                let h = norm - delta_pull;
                if h <= 0.0 {
                    continue;
                }
                out.pull += h * h * inv_n * inv_k * inv_b;
                let coef = 2.0 * h * inv_n * inv_k * inv_b / norm;
                for c in 0..dim {
                    // d/dμ of ‖μ − e‖ is r/‖r‖; d/de is the negative.
                    g_mean[ci][c] += coef * r[c];
                    grad[base + c * plane + i] += R::lit(-coef * r[c]);
                }
            }
        }
        if k > 1 {
            let inv_pairs = 1.0 / (k * (k - 1)) as f64;
            for a in 0..k {
                for bb in 0..k {
                    if a == bb {
                        continue;
                    }
                    let diff: Vec<f64> = (0..dim).map(|c| means[a][c] - means[bb][c]).collect();
                    let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let h = delta_push - dist;
                    if h <= 0.0 {
                        continue;
                    }
                    out.push += h * h * inv_pairs * inv_b;
                    if dist > 0.0 {
                        let coef = -2.0 * h * inv_pairs * inv_b / dist;
                        for c in 0..dim {
                            g_mean[a][c] += coef * diff[c];
                            g_mean[bb][c] -= coef * diff[c];
                        }
                    }
                }
            }
        }
        for (ci, m) in members.iter().enumerate() {
            let inv_n = 1.0 / m.len() as f64;
            for &i in m {
                for c in 0..dim {
                    grad[base + c * plane + i] += R::lit(g_mean[ci][c] * inv_n);
                }
            }
        }
    }
    Ok((out, grad))
}

pub fn embedding_loss<R: Real>(
    emb: &[R],
    labels: &[u32],
    dim: usize,
    plane: usize,
    delta_pull: f64,
    delta_push: f64,
) -> Result<EmbeddingLoss> {
    Ok(embedding_loss_with_grad(emb, labels, dim, plane, delta_pull, delta_push)?.0)
}

// ---------------------------------------------------------------- targets

/// Training targets for a batch, laid out to match the decoder head tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTargets {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub confidence: Vec<f32>,
    /// `[batch, 2, plane]`.
    pub offsets: Vec<f32>,
    pub mask: Vec<f32>,
    pub labels: Vec<u32>,
    /// Per image, per lane: `(row, x)` in decoder cells.
    pub lanes: Vec<Vec<Vec<(usize, f64)>>>,
}

impl BatchTargets {
    pub fn stack(items: &[TrainingTargets]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty target batch".into()))?;
        let (height, width) = (first.height, first.width);
        let mut t = BatchTargets {
            batch: items.len(),
            height,
            width,
            confidence: Vec::new(),
            offsets: Vec::new(),
            mask: Vec::new(),
            labels: Vec::new(),
            lanes: Vec::new(),
        };
        for it in items {
            if (it.height, it.width) != (height, width) {
                return Err(Error::shape("BatchTargets", "targets of differing resolution"));
            }
            t.confidence.extend_from_slice(&it.confidence);
            t.offsets.extend_from_slice(&it.offsets[0]);
            t.offsets.extend_from_slice(&it.offsets[1]);
            t.mask.extend_from_slice(&it.mask);
            t.labels.extend_from_slice(&it.labels);
            t.lanes.push(it.lane_cells());
        }
        Ok(t)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

// ---------------------------------------------------------------- tape ops

impl<R: Real> Tape<R> {
    fn loss_node(&mut self, value: f64, x: Var, grad: Vec<R>) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let g = Tensor::from_vec(&shape, grad)?;
        self.record(
            Tensor::scalar(R::lit(value)),
            &[x],
            Box::new(move |ctx| Ok(vec![Some(g.scale(ctx.upstream.item()))])),
        )
    }

    pub fn focal_loss(&mut self, pred: Var, target: &[f32], alpha: f64, gamma: f64) -> Result<Var> {
        let (v, g) = focal_loss_with_grad(self.value(pred).data(), target, alpha, gamma)?;
        self.loss_node(v, pred, g)
    }

    pub fn offset_loss(&mut self, pred: Var, target: &[f32], mask: &[f32], plane: usize) -> Result<(Var, OffsetLoss)> {
        let (v, g) = offset_loss_with_grad(self.value(pred).data(), target, mask, plane)?;
        Ok((self.loss_node(v.value, pred, g)?, v))
    }

    pub fn lineiou_loss(&mut self, conf: Var, lanes: &[Vec<Vec<(usize, f64)>>], e: f64, window: usize) -> Result<Var> {
        let [_, _, _, h, w] = self.value(conf).dims5("lineiou_loss")?;
        let (v, g) = lineiou_map_loss_with_grad(self.value(conf).data(), h, w, lanes, e, window)?;
        self.loss_node(v, conf, g)
    }

    pub fn embedding_loss(
        &mut self,
        emb: Var,
        labels: &[u32],
        delta_pull: f64,
        delta_push: f64,
    ) -> Result<(Var, EmbeddingLoss)> {
        let [_, d, _, h, w] = self.value(emb).dims5("embedding_loss")?;
        let (v, g) = embedding_loss_with_grad(self.value(emb).data(), labels, d, h * w, delta_pull, delta_push)?;
        Ok((self.loss_node(v.total(), emb, g)?, v))
    }
}

// ---------------------------------------------------------------- total

/// Unweighted term values of one evaluation; absent terms are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub focal: f64,
    pub offset: Option<f64>,
    pub lineiou: Option<f64>,
    pub embedding: Option<f64>,
    /// No valid offset cell in the batch.
    pub offset_empty: bool,
}

pub const LOSS_LOG_HEADER: &str = "step\ttotal\tfocal\toffset\tlineiou\tembedding";

impl LossBreakdown {
    /// Tab-separated log line; absent terms are written as `-`.
    pub fn log_line(&self, step: usize) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.9e}"));
        format!(
            "{step}\t{:.9e}\t{:.9e}\t{}\t{}\t{}",
            self.total,
            self.focal,
            f(self.offset),
            f(self.lineiou),
            f(self.embedding)
        )
    }
}

/// Weighted total loss for the given variant; returns the scalar tape node and
/// the per-term breakdown.
pub fn total_loss<R: Real>(
    tape: &mut Tape<R>,
    out: &ForwardOutput,
    targets: &BatchTargets,
    w: &LossWeights,
    variant: Variant,
) -> Result<(Var, LossBreakdown)> {
    w.validate()?;
    let (use_offset, use_lineiou, use_embed) = match (w.form, variant) {
        (LossForm::PerVariant, Variant::Network1) => (true, false, true),
        (LossForm::PerVariant, Variant::Network2) => (false, true, false),
        (LossForm::Combined, _) => (true, true, false),
    };
    let conf_shape = tape.value(out.confidence).dims5("total_loss")?;
    if [conf_shape[0], conf_shape[3], conf_shape[4]] != [targets.batch, targets.height, targets.width] {
        return Err(Error::shape(
            "total_loss",
            format!(
                "confidence {:?} vs targets {}x{}x{}",
                conf_shape, targets.batch, targets.height, targets.width
            ),
        ));
    }
    let mut br = LossBreakdown::default();
    let mut terms = Vec::new();
    let focal = tape.focal_loss(out.confidence, &targets.confidence, w.alpha, w.gamma)?;
    br.focal = tape.value(focal).item().as_f64();
    terms.push((focal, w.w_focal));
    if use_offset {
        let off = out
            .offsets
            .ok_or_else(|| Error::InvalidArgument("offset term requested but the model has no offset head".into()))?;
        let (v, info) = tape.offset_loss(off, &targets.offsets, &targets.mask, targets.plane())?;
        br.offset = Some(info.value);
        br.offset_empty = info.empty;
        terms.push((v, w.w_offset));
    }
    if use_lineiou {
        let v = tape.lineiou_loss(out.confidence, &targets.lanes, w.lineiou_e, w.lineiou_window)?;
        br.lineiou = Some(tape.value(v).item().as_f64());
        terms.push((v, w.w_lineiou));
    }
    if use_embed {
        let emb = out
            .embeddings
            .ok_or_else(|| Error::InvalidArgument("embedding term requested but the model has no embedding head".into()))?;
        let (v, info) = tape.embedding_loss(emb, &targets.labels, w.delta_pull, w.delta_push)?;
        br.embedding = Some(info.total());
        terms.push((v, w.w_embed));
    }
    let total = tape.weighted_sum(&terms)?;
    br.total = tape.value(total).item().as_f64();
    Ok((total, br))
}
