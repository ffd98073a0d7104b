//! Whole acceptance suites, shared by the per-topic integration tests and the
//! `acceptance` runner of the command-line crate.

use std::time::Instant;

use lane3d::attention::{attend, self_attention, AttentionParams, DEFAULT_SCORE_BUDGET};
use lane3d::data::{rasterize_targets, ClipAnnotation, ABSENT};
use lane3d::gradcheck::{grad_check, grad_check_stepped, tape_op, Coverage};
use lane3d::losses::{
    embedding_loss, focal_loss, line_iou, lineiou_map_loss_with_grad, offset_loss, total_loss, BatchTargets,
    LossWeights,
};
use lane3d::metrics::{metrics_from_counts, point_confusion, ConfusionCounts};
use lane3d::losses::LossForm;
use lane3d::network::{count_params, Experiment, ForwardOutput, Model, ModelConfig, Scale, Variant};
use lane3d::ops::conv::{conv3d_forward, transposed_conv3d_forward, ConvGeometry};
use lane3d::ops::norm::{batch_norm, BatchNormState, NormMode};
use lane3d::postprocess::{
    brute_force_path, cluster_indices, eval_quadratic, ransac_fit, shortest_path, Keypoint, RansacConfig,
    SmoothingGraph,
};
use lane3d::tape::NormInput;
use lane3d::{Error, ParamId, ParamStore, Session, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles::{self, Vol};

#[derive(Clone, Debug)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn from_failures(failures: Vec<String>, summary: String) -> Self {
        if failures.is_empty() {
            Outcome {
                passed: true,
                detail: summary,
            }
        } else {
            let shown: Vec<&str> = failures.iter().take(5).map(String::as_str).collect();
            Outcome {
                passed: false,
                detail: format!("{summary}; {} failure(s): {}", failures.len(), shown.join("; ")),
            }
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_vol(shape: [usize; 5], r: &mut ChaCha8Rng) -> (Tensor<f32>, Vol) {
    let t = Tensor::<f32>::uniform(&shape, -1.0, 1.0, r);
    let v = Vol::from_tensor(&t);
    (t, v)
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Largest `|got − want| / max(1, |want|)`.
fn scaled_error(got: &[f64], want: &[f64]) -> f64 {
    if got.len() != want.len() {
        return f64::INFINITY;
    }
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / w.abs().max(1.0))
        .fold(0.0, f64::max)
}

pub const ORACLE_TOL: f64 = 1e-5;
pub const ORACLE_CASES: usize = 24;

// ------------------------------------------------------------------ oracle

/// One named kernel compared against its reference on `ORACLE_CASES` shapes.
/// Returns the worst scaled error.
pub fn oracle_conv3d(seed: u64) -> Result<f64, Error> {
    let mut worst = 0.0f64;
    let mut r = rng(seed);
    for _ in 0..ORACLE_CASES {
        let kernel = [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3)];
        let stride = [r.random_range(1..=2), r.random_range(1..=2), r.random_range(1..=2)];
        let pad = [r.random_range(0..kernel[0]), r.random_range(0..kernel[1]), r.random_range(0..kernel[2])];
        let shape = [
            r.random_range(1..=2),
            r.random_range(1..=4),
            r.random_range(kernel[0]..=4),
            r.random_range(kernel[1]..=7),
            r.random_range(kernel[2]..=7),
        ];
        let co = r.random_range(1..=4);
        let (x, xv) = random_vol(shape, &mut r);
        let (w, wv) = random_vol([co, shape[1], kernel[0], kernel[1], kernel[2]], &mut r);
        let b = Tensor::<f32>::uniform(&[co], -1.0, 1.0, &mut r);
        let g = ConvGeometry::new(kernel, stride, pad);
        let y = conv3d_forward(&x, &w, Some(&b), &g)?;
        let want = oracles::conv3d(&xv, &wv, Some(&to_f64(b.data())), stride, pad);
        if y.shape() != want.shape {
            return Err(Error::InvalidArgument(format!("conv3d shape {:?} vs {:?}", y.shape(), want.shape)));
        }
        worst = worst.max(scaled_error(&to_f64(y.data()), &want.data));
    }
    Ok(worst)
}

pub fn oracle_transposed_conv3d(seed: u64) -> Result<f64, Error> {
    let mut worst = 0.0f64;
    let mut r = rng(seed);
    for _ in 0..ORACLE_CASES {
        let kernel = [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3)];
        let stride = [r.random_range(1..=2), r.random_range(1..=2), r.random_range(1..=2)];
        let pad: [usize; 3] = std::array::from_fn(|i| r.random_range(0..=(kernel[i] - 1) / 2));
        let shape = [
            r.random_range(1..=2),
            r.random_range(1..=4),
            r.random_range(1..=3),
            r.random_range(1..=5),
            r.random_range(1..=5),
        ];
        let co = r.random_range(1..=4);
        let (x, xv) = random_vol(shape, &mut r);
        let (w, wv) = random_vol([shape[1], co, kernel[0], kernel[1], kernel[2]], &mut r);
        let b = Tensor::<f32>::uniform(&[co], -1.0, 1.0, &mut r);
        let g = ConvGeometry::new(kernel, stride, pad);
        let y = transposed_conv3d_forward(&x, &w, Some(&b), &g)?;
        let want = oracles::transposed_conv3d(&xv, &wv, Some(&to_f64(b.data())), stride, pad);
        if y.shape() != want.shape {
            return Err(Error::InvalidArgument(format!("transposed conv3d shape {:?} vs {:?}", y.shape(), want.shape)));
        }
        worst = worst.max(scaled_error(&to_f64(y.data()), &want.data));
    }
    Ok(worst)
}

/// Training-mode output and running statistics, then inference with them.
pub fn oracle_batch_norm(seed: u64) -> Result<f64, Error> {
    let mut worst = 0.0f64;
    let mut r = rng(seed);
    for _ in 0..ORACLE_CASES {
        let shape = [
            r.random_range(1..=3),
            r.random_range(1..=5),
            r.random_range(1..=3),
            r.random_range(1..=6),
            r.random_range(2..=6),
        ];
        let c = shape[1];
        let (x, xv) = random_vol(shape, &mut r);
        let mut state = BatchNormState::<f32>::new(c);
        state.gamma = Tensor::uniform(&[c], 0.5, 1.5, &mut r);
        state.beta = Tensor::uniform(&[c], -0.5, 0.5, &mut r);
        state.running_mean = Tensor::uniform(&[c], -0.2, 0.2, &mut r);
        state.running_var = Tensor::uniform(&[c], 0.5, 1.5, &mut r);
        let (g, b) = (to_f64(state.gamma.data()), to_f64(state.beta.data()));
        let (rm0, rv0) = (to_f64(state.running_mean.data()), to_f64(state.running_var.data()));
        let y = batch_norm(&x, &mut state)?;
        let (mean, var) = oracles::channel_stats(&xv);
        let want = oracles::normalize(&xv, &g, &b, &mean, &var, state.eps);
        worst = worst.max(scaled_error(&to_f64(y.data()), &want.data));

        let count = (shape[0] * shape[2] * shape[3] * shape[4]) as f64;
        let m = state.momentum;
        let rm: Vec<f64> = (0..c).map(|i| (1.0 - m) * rm0[i] + m * mean[i]).collect();
        let rv: Vec<f64> = (0..c).map(|i| (1.0 - m) * rv0[i] + m * var[i] * count / (count - 1.0)).collect();
        worst = worst.max(scaled_error(&to_f64(state.running_mean.data()), &rm));
        worst = worst.max(scaled_error(&to_f64(state.running_var.data()), &rv));

        state.mode = NormMode::Inference;
        let y = batch_norm(&x, &mut state)?;
        let want = oracles::normalize(&xv, &g, &b, &rm, &rv, state.eps);
        worst = worst.max(scaled_error(&to_f64(y.data()), &want.data));
    }
    Ok(worst)
}

/// Bare scaled dot-product attention and the full residual block.
pub fn oracle_attention(seed: u64) -> Result<f64, Error> {
    let mut worst = 0.0f64;
    let mut r = rng(seed);
    for _ in 0..ORACLE_CASES {
        let n = r.random_range(1..=2);
        let (t, h, w) = (r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4));
        let d = r.random_range(1..=4);
        let c = r.random_range(1..=5);
        let (q, qv) = random_vol([n, d, t, h, w], &mut r);
        let (k, kv) = random_vol([n, d, t, h, w], &mut r);
        let (v, vv) = random_vol([n, c, t, h, w], &mut r);
        let y = attend(&q, &k, &v, DEFAULT_SCORE_BUDGET)?;
        let want = oracles::attend(&qv, &kv, &vv);
        worst = worst.max(scaled_error(&to_f64(y.data()), &want.data));

        let p = AttentionParams::<f32>::random(c, d, r.random_range(-1.0..1.0), &mut r)?;
        let y = self_attention(&v, &p, DEFAULT_SCORE_BUDGET)?;
        let want = oracles::self_attention(
            &vv,
            &Vol::from_tensor(&p.wq),
            &to_f64(p.bq.data()),
            &Vol::from_tensor(&p.wk),
            &to_f64(p.bk.data()),
            &Vol::from_tensor(&p.wv),
            &to_f64(p.bv.data()),
            p.gamma as f64,
        );
        worst = worst.max(scaled_error(&to_f64(y.data()), &want.data));
    }
    Ok(worst)
}

fn random_lanes(r: &mut ChaCha8Rng, batch: usize, h: usize, w: usize) -> Vec<Vec<Vec<(usize, f64)>>> {
    (0..batch)
        .map(|_| {
            let lanes = r.random_range(0..=3);
            (0..lanes)
                .map(|_| {
                    let mut lane = Vec::new();
                    for row in 0..h {
                        if r.random_bool(0.6) {
                            lane.push((row, r.random_range(0.0..w as f64)));
                        }
                    }
                    lane
                })
                .collect()
        })
        .collect()
}

/// Focal, offset, LineIoU (row form and map form) and embedding losses.
pub fn oracle_losses(seed: u64) -> Result<f64, Error> {
    let mut worst = 0.0f64;
    let mut r = rng(seed);
    let w = LossWeights::default();
    for _ in 0..ORACLE_CASES {
        let batch = r.random_range(1..=3);
        let (h, wd) = (r.random_range(1..=6), r.random_range(2..=9));
        let plane = h * wd;
        let n = batch * plane;

        let p: Vec<f32> = (0..n).map(|_| r.random_range(0.01..0.99)).collect();
        let target: Vec<f32> = (0..n).map(|_| if r.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let (alpha, gamma) = (r.random_range(0.1..1.0), r.random_range(0.0..3.0));
        let got = focal_loss(&p, &target, alpha, gamma)?;
        let want = oracles::focal(&to_f64(&p), &to_f64(&target), alpha, gamma);
        worst = worst.max(scaled_error(&[got], &[want]));

        let pred: Vec<f32> = (0..2 * n).map(|_| r.random_range(-1.0..1.0)).collect();
        let off: Vec<f32> = (0..2 * n).map(|_| r.random_range(0.0..1.0)).collect();
        let mask: Vec<f32> = (0..n).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let got = offset_loss(&pred, &off, &mask, plane)?;
        match oracles::offset_mse(&to_f64(&pred), &to_f64(&off), &to_f64(&mask), plane) {
            Some(want) => worst = worst.max(scaled_error(&[got.value], &[want])),
            None if got.empty && got.value == 0.0 => {}
            None => return Err(Error::InvalidArgument("offset loss with no valid cell is not flagged empty".into())),
        }

        let rows = r.random_range(1..=12);
        let e = r.random_range(0.5..20.0);
        let lane = |r: &mut ChaCha8Rng| -> Vec<Option<f64>> {
            (0..rows).map(|_| r.random_bool(0.8).then(|| r.random_range(0.0..100.0))).collect()
        };
        let (a, b) = (lane(&mut r), lane(&mut r));
        worst = worst.max(scaled_error(&[line_iou(&a, &b, e)], &[oracles::line_iou(&a, &b, e)]));

        let lanes = random_lanes(&mut r, batch, h, wd);
        let window = r.random_range(0..=3);
        let (got, _) = lineiou_map_loss_with_grad(&p, h, wd, &lanes, w.lineiou_e, window)?;
        let want = oracles::lineiou_map(&to_f64(&p), h, wd, &lanes, w.lineiou_e, window);
        worst = worst.max(scaled_error(&[got], &[want]));

        let dim = r.random_range(1..=4);
        let emb: Vec<f32> = (0..dim * n).map(|_| r.random_range(-2.0..2.0)).collect();
        let labels: Vec<u32> = (0..n).map(|_| r.random_range(0..=3)).collect();
        let (dv, dd) = (r.random_range(0.0..1.0), r.random_range(1.0..4.0));
        let got = embedding_loss(&emb, &labels, dim, plane, dv, dd)?;
        let (pull, push) = oracles::embedding(&to_f64(&emb), &labels, dim, plane, dv, dd);
        worst = worst.max(scaled_error(&[got.pull, got.push], &[pull, push]));
    }
    Ok(worst)
}

/// Every kernel against its nested-loop reference.
pub fn oracle_suite() -> Outcome {
    let start = Instant::now();
    type Check = fn(u64) -> Result<f64, Error>;
    let checks: [(&str, Check); 5] = [
        ("conv3d", oracle_conv3d),
        ("transposed conv3d", oracle_transposed_conv3d),
        ("batch norm", oracle_batch_norm),
        ("attention", oracle_attention),
        ("losses", oracle_losses),
    ];
    let mut failures = Vec::new();
    let mut parts = Vec::new();
    for (name, f) in checks {
        match f(17) {
            Ok(err) if err <= ORACLE_TOL => parts.push(format!("{name} {err:.1e}")),
            Ok(err) => failures.push(format!("{name}: error {err:.3e} > {ORACLE_TOL:e}")),
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 120.0 {
        failures.push(format!("runtime {secs:.1}s >= 120s"));
    }
    Outcome::from_failures(
        failures,
        format!("{ORACLE_CASES} shapes per kernel, {}; {secs:.1}s", parts.join(", ")),
    )
}

// ------------------------------------------------------------------ gradient

pub const GRAD_TOL: f64 = 1e-3;
pub const GRAD_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const GRAD_H: f64 = 1e-6;

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

/// Entries pushed at least `margin` away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], margin: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    randn(shape, r).map(|v| if v >= 0.0 { v + margin } else { v - margin })
}

fn small5(r: &mut ChaCha8Rng) -> [usize; 5] {
    [
        r.random_range(1..=2),
        r.random_range(1..=3),
        r.random_range(1..=3),
        r.random_range(1..=4),
        r.random_range(2..=4),
    ]
}

/// Maximum relative error of one tape op at one seed.
pub fn op_gradient(op: &str, seed: u64) -> Result<f64, Error> {
    let mut r = rng(seed.wrapping_mul(1009).wrapping_add(op.len() as u64));
    let s = small5(&mut r);
    match op {
        "conv3d" => {
            let k = [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3)];
            let st = [r.random_range(1..=2), r.random_range(1..=2), r.random_range(1..=2)];
            let g = ConvGeometry::new(k, st, [k[0] / 2, k[1] / 2, k[2] / 2]);
            let co = r.random_range(1..=3);
            let x = randn(&s, &mut r);
            let w = randn(&[co, s[1], k[0], k[1], k[2]], &mut r);
            let b = randn(&[co], &mut r);
            grad_check(tape_op(move |t, v| t.conv3d(v[0], v[1], Some(v[2]), g), seed), &[x, w, b], GRAD_H)
        }
        "transposed_conv3d" => {
            let k = [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3)];
            let st = [r.random_range(1..=2), r.random_range(1..=2), r.random_range(1..=2)];
            let g = ConvGeometry::new(k, st, [(k[0] - 1) / 2, (k[1] - 1) / 2, (k[2] - 1) / 2]);
            let co = r.random_range(1..=3);
            let x = randn(&s, &mut r);
            let w = randn(&[s[1], co, k[0], k[1], k[2]], &mut r);
            let b = randn(&[co], &mut r);
            grad_check(
                tape_op(move |t, v| t.transposed_conv3d(v[0], v[1], Some(v[2]), g), seed),
                &[x, w, b],
                GRAD_H,
            )
        }
        "batch_norm_train" => {
            let s = [2, s[1], s[2], s[3], s[4]];
            let x = randn(&s, &mut r);
            let g = Tensor::uniform(&[s[1]], 0.5, 1.5, &mut r);
            let b = randn(&[s[1]], &mut r);
            grad_check(
                tape_op(|t, v| Ok(t.batch_norm(v[0], v[1], v[2], NormInput::Train { eps: 1e-5 })?.0), seed),
                &[x, g, b],
                GRAD_H,
            )
        }
        "batch_norm_inference" => {
            let x = randn(&s, &mut r);
            let g = randn(&[s[1]], &mut r);
            let b = randn(&[s[1]], &mut r);
            let mean: Vec<f64> = (0..s[1]).map(|_| r.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..s[1]).map(|_| r.random_range(0.5..2.0)).collect();
            grad_check(
                tape_op(
                    move |t, v| {
                        let mode = NormInput::Inference {
                            mean: &mean,
                            var: &var,
                            eps: 1e-5,
                        };
                        Ok(t.batch_norm(v[0], v[1], v[2], mode)?.0)
                    },
                    seed,
                ),
                &[x, g, b],
                GRAD_H,
            )
        }
        "relu" => grad_check(tape_op(|t, v| t.relu(v[0]), seed), &[away_from_zero(&s, 0.01, &mut r)], GRAD_H),
        "leaky_relu" => grad_check(
            tape_op(|t, v| t.leaky_relu(v[0], 0.1), seed),
            &[away_from_zero(&s, 0.01, &mut r)],
            GRAD_H,
        ),
        "sigmoid" => grad_check(tape_op(|t, v| t.sigmoid(v[0]), seed), &[randn(&s, &mut r)], GRAD_H),
        "dropout" => grad_check(tape_op(move |t, v| t.dropout(v[0], 0.3, seed), seed), &[randn(&s, &mut r)], GRAD_H),
        "add" => grad_check(tape_op(|t, v| t.add(v[0], v[1]), seed), &[randn(&s, &mut r), randn(&s, &mut r)], GRAD_H),
        "scale" => grad_check(tape_op(|t, v| t.scale(v[0], -1.7), seed), &[randn(&s, &mut r)], GRAD_H),
        "weighted_sum" => grad_check(
            tape_op(
                |t, v| {
                    let a = t.sum_all(v[0])?;
                    let b = t.relu(v[1])?;
                    let b = t.sum_all(b)?;
                    let c = t.sigmoid(v[2])?;
                    let c = t.sum_all(c)?;
                    t.weighted_sum(&[(a, 0.3), (b, -2.0), (c, 1.1)])
                },
                seed,
            ),
            &[randn(&s, &mut r), away_from_zero(&s, 0.01, &mut r), randn(&s, &mut r)],
            GRAD_H,
        ),
        "upsample_nearest" => {
            let f = [r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3)];
            grad_check(tape_op(move |t, v| t.upsample_nearest(v[0], f), seed), &[randn(&s, &mut r)], GRAD_H)
        }
        "temporal_mean" => grad_check(tape_op(|t, v| t.temporal_mean(v[0]), seed), &[randn(&s, &mut r)], GRAD_H),
        "channels" => {
            let s = [s[0], 3, s[2], s[3], s[4]];
            grad_check(tape_op(|t, v| t.channels(v[0], 1, 3), seed), &[randn(&s, &mut r)], GRAD_H)
        }
        "sum_all" => grad_check(tape_op(|t, v| t.sum_all(v[0]), seed), &[randn(&s, &mut r)], GRAD_H),
        "project" => {
            let w = randn(&s, &mut r);
            grad_check(tape_op(move |t, v| t.project(v[0], w.clone()), seed), &[randn(&s, &mut r)], GRAD_H)
        }
        "attend" => {
            let (d, c) = (r.random_range(1..=3), r.random_range(1..=3));
            let q = randn(&[s[0], d, s[2], s[3], s[4]], &mut r);
            let k = randn(&[s[0], d, s[2], s[3], s[4]], &mut r);
            let v = randn(&[s[0], c, s[2], s[3], s[4]], &mut r);
            grad_check(tape_op(|t, v| t.attend(v[0], v[1], v[2], DEFAULT_SCORE_BUDGET), seed), &[q, k, v], GRAD_H)
        }
        "mul_scalar" => grad_check(
            tape_op(|t, v| t.mul_scalar(v[0], v[1]), seed),
            &[randn(&s, &mut r), Tensor::scalar(r.random_range(-2.0..2.0))],
            GRAD_H,
        ),
        "focal_loss" => {
            let x = randn(&s, &mut r);
            let target: Vec<f32> = (0..x.numel()).map(|_| if r.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
            let (alpha, gamma) = (r.random_range(0.1..1.0), r.random_range(0.0..3.0));
            grad_check(
                tape_op(
                    move |t, v| {
                        let p = t.sigmoid(v[0])?;
                        t.focal_loss(p, &target, alpha, gamma)
                    },
                    seed,
                ),
                &[x],
                GRAD_H,
            )
        }
        "offset_loss" => {
            let (b, h, w) = (s[0], s[3], s[4]);
            let plane = h * w;
            let x = randn(&[b, 2, 1, h, w], &mut r);
            let target: Vec<f32> = (0..2 * b * plane).map(|_| r.random_range(0.0..1.0)).collect();
            let mut mask: Vec<f32> = (0..b * plane).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            mask[0] = 1.0;
            grad_check(
                tape_op(move |t, v| Ok(t.offset_loss(v[0], &target, &mask, plane)?.0), seed),
                &[x],
                GRAD_H,
            )
        }
        "lineiou_loss" => {
            let (b, h, w) = (s[0], s[3] + 2, s[4] + 6);
            let x = Tensor::uniform(&[b, 1, 1, h, w], 0.05, 0.95, &mut r);
            let mut lanes = random_lanes(&mut r, b, h, w);
            lanes[0].push(vec![(0, r.random_range(0.0..w as f64))]);
            let e = r.random_range(1.0..8.0);
            grad_check(tape_op(move |t, v| t.lineiou_loss(v[0], &lanes, e, 3), seed), &[x], GRAD_H)
        }
        "embedding_loss" => {
            let (b, h, w) = (s[0], s[3], s[4]);
            let x = randn(&[b, 3, 1, h, w], &mut r);
            let labels: Vec<u32> = (0..b * h * w).map(|_| r.random_range(0..=3)).collect();
            grad_check(
                tape_op(move |t, v| Ok(t.embedding_loss(v[0], &labels, 0.3, 2.5)?.0), seed),
                &[x],
                GRAD_H,
            )
        }
        "total_loss" => total_loss_gradient(seed),
        other => Err(Error::InvalidArgument(format!("no gradient check for `{other}`"))),
    }
}

pub const TAPE_OPS: [&str; 23] = [
    "conv3d",
    "transposed_conv3d",
    "batch_norm_train",
    "batch_norm_inference",
    "relu",
    "leaky_relu",
    "sigmoid",
    "dropout",
    "add",
    "scale",
    "weighted_sum",
    "upsample_nearest",
    "temporal_mean",
    "channels",
    "sum_all",
    "project",
    "attend",
    "mul_scalar",
    "focal_loss",
    "offset_loss",
    "lineiou_loss",
    "embedding_loss",
    "total_loss",
];

/// Two-lane annotation on a `w × h` frame, jittered by the seed.
pub fn planted_annotation(w: usize, h: usize, r: &mut ChaCha8Rng) -> ClipAnnotation {
    let rows: Vec<f64> = (0..h).step_by(2).map(|y| y as f64).collect();
    let wf = w as f64;
    let lanes = (0..2)
        .map(|i| {
            let bottom = wf * (0.25 + 0.5 * i as f64) + r.random_range(-3.0..3.0);
            let slope = if i == 0 { 0.4 } else { -0.4 } + r.random_range(-0.1..0.1);
            rows.iter()
                .map(|&y| {
                    let x = bottom + slope * (h as f64 - 1.0 - y);
                    if y < 2.0 || x < 0.0 || x >= wf {
                        ABSENT
                    } else {
                        x
                    }
                })
                .collect()
        })
        .collect();
    ClipAnnotation::new("planted", rows, lanes)
}

/// Central-difference steps for the whole-network check. Thousands of ReLUs
/// sit downstream of every parameter, so a fixed step either straddles a kink
/// or drowns small gradients in round-off.
pub const NETWORK_STEPS: [f64; 7] = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9];

/// Finite-difference check of the whole micro network, from parameters to the
/// training loss of its preset, in training mode with a fixed dropout seed.
pub fn network_gradient(experiment: Experiment, seed: u64, per_input: usize) -> Result<f64, Error> {
    let cfg = ModelConfig::micro(experiment);
    let (h, w) = cfg.encoder.input_resolution;
    let t = cfg.encoder.temporal_depth;
    let (model, store) = Model::new(cfg, seed)?;
    let base: ParamStore<f64> = store.cast();
    let ids: Vec<ParamId> = base.ids().filter(|&id| base.is_trainable(id)).collect();
    let inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| base.get(id).clone()).collect();
    let mut r = rng(seed ^ 0xA5A5);
    let clip = Tensor::<f64>::uniform(&[2, 3, t, h, w], 0.0, 1.0, &mut r);
    let grid = model.target_grid(w, h);
    let items = vec![
        rasterize_targets(&planted_annotation(w, h, &mut r), &grid)?,
        rasterize_targets(&planted_annotation(w, h, &mut r), &grid)?,
    ];
    let targets = BatchTargets::stack(&items)?;
    let weights = LossWeights::default();
    let bind = |x: &[Tensor<f64>]| -> Result<ParamStore<f64>, Error> {
        let mut store = base.clone();
        for (&id, v) in ids.iter().zip(x) {
            store.set(id, v.clone())?;
        }
        Ok(store)
    };
    let analytic = {
        let store = bind(&inputs)?;
        let mut s = Session::new(&store, true, true, seed);
        let out = model.forward(&mut s, &clip)?;
        let (loss, _) = total_loss(&mut s.tape, &out, &targets, &weights, model.variant())?;
        let mut g = s.tape.backward(loss)?;
        let mut found = s.param_grads(&mut g);
        ids.iter()
            .zip(&inputs)
            .map(|(id, v)| match found.iter().position(|(p, _)| p == id) {
                Some(i) => found.swap_remove(i).1,
                None => Tensor::zeros(v.shape()),
            })
            .collect::<Vec<_>>()
    };
    // forward only: no backward graph is recorded
    let value = |x: &[Tensor<f64>]| {
        let store = bind(x)?;
        let mut s = Session::new(&store, true, false, seed);
        let out = model.forward(&mut s, &clip)?;
        let (loss, _) = total_loss(&mut s.tape, &out, &targets, &weights, model.variant())?;
        Ok(s.tape.value(loss).item())
    };
    grad_check_stepped(&analytic, value, &inputs, &NETWORK_STEPS, Coverage::Sampled { per_input, seed })
}

/// Weighted total of every loss form and variant, on synthetic head outputs.
fn total_loss_gradient(seed: u64) -> Result<f64, Error> {
    let mut r = rng(seed ^ 0x7070);
    let (b, h, w) = (2, 6, 10);
    let mut items = Vec::new();
    for _ in 0..b {
        let ann = planted_annotation(4 * w, 4 * h, &mut r);
        let grid = lane3d::data::TargetGrid {
            height: h,
            width: w,
            stride: 4,
            transform: lane3d::network::Affine::identity(),
        };
        items.push(rasterize_targets(&ann, &grid)?);
    }
    let targets = BatchTargets::stack(&items)?;
    let inputs = [
        randn(&[b, 1, 1, h, w], &mut r),
        randn(&[b, 2, 1, h, w], &mut r),
        randn(&[b, 4, 1, h, w], &mut r),
    ];
    let mut worst = 0.0f64;
    for (form, variant) in [
        (LossForm::PerVariant, Variant::Network1),
        (LossForm::PerVariant, Variant::Network2),
        (LossForm::Combined, Variant::Network1),
    ] {
        let weights = LossWeights {
            form,
            w_focal: r.random_range(0.5..2.0),
            w_offset: r.random_range(0.5..2.0),
            w_lineiou: r.random_range(0.5..2.0),
            w_embed: r.random_range(0.5..2.0),
            ..LossWeights::default()
        };
        let targets = targets.clone();
        let op = tape_op(
            move |t, v| {
                let out = ForwardOutput {
                    confidence: t.sigmoid(v[0])?,
                    offsets: Some(t.sigmoid(v[1])?),
                    embeddings: Some(v[2]),
                };
                Ok(total_loss(t, &out, &targets, &weights, variant)?.0)
            },
            seed,
        );
        worst = worst.max(grad_check(op, &inputs, GRAD_H)?);
    }
    Ok(worst)
}

/// Sampled coordinates per parameter tensor in the full-network check.
pub const NETWORK_COORDS: usize = 3;

pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst_op = 0.0f64;
    for op in TAPE_OPS {
        for seed in GRAD_SEEDS {
            match op_gradient(op, seed) {
                Ok(e) if e < GRAD_TOL => worst_op = worst_op.max(e),
                Ok(e) => failures.push(format!("{op} seed {seed}: {e:.3e}")),
                Err(err) => failures.push(format!("{op} seed {seed}: {err}")),
            }
        }
    }
    let mut worst_net = 0.0f64;
    for e in [Experiment::Exp1, Experiment::Exp2, Experiment::Exp3] {
        for seed in GRAD_SEEDS {
            match network_gradient(e, seed, NETWORK_COORDS) {
                Ok(v) if v < GRAD_TOL => worst_net = worst_net.max(v),
                Ok(v) => failures.push(format!("network {} seed {seed}: {v:.3e}", e.name())),
                Err(err) => failures.push(format!("network {} seed {seed}: {err}", e.name())),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 300.0 {
        failures.push(format!("runtime {secs:.1}s >= 300s"));
    }
    Outcome::from_failures(
        failures,
        format!(
            "{} ops x {} seeds worst {worst_op:.1e}; micro network (3 presets) worst {worst_net:.1e}; {secs:.1}s",
            TAPE_OPS.len(),
            GRAD_SEEDS.len()
        ),
    )
}

// ------------------------------------------------------------------ geometry

/// One RANSAC trial: 30 % of the rows carry an outlier 8–60 px off the lane,
/// the rest carry the lane with ±0.3 px noise. Returns the largest horizontal
/// gap between the RANSAC curve and least squares on the true inliers.
pub fn ransac_trial(seed: u64) -> Result<f64, Error> {
    let mut r = rng(seed);
    let a = r.random_range(-4e-4..4e-4);
    let b = r.random_range(-1.0..1.0);
    let c = r.random_range(300.0..900.0) - a * 400.0 * 400.0 - b * 400.0;
    let truth = [a, b, c];
    let rows: Vec<f64> = (0..40).map(|i| 160.0 + 14.0 * i as f64).collect();
    let outliers = rows.len() * 3 / 10;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, r.random_range(0..=i));
    }
    let mut points = Vec::new();
    let mut inliers = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        let y = rows[i];
        let x = eval_quadratic(&truth, y);
        if k < outliers {
            let off = r.random_range(8.0..60.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
            points.push((x + off, y));
        } else {
            let p = (x + r.random_range(-0.3..0.3), y);
            points.push(p);
            inliers.push(p);
        }
    }
    let cfg = RansacConfig {
        seed,
        ..RansacConfig::default()
    };
    let fit = ransac_fit(&points, &cfg)?;
    let ls = oracles::lstsq_quadratic(&inliers);
    Ok(rows
        .iter()
        .map(|&y| (eval_quadratic(&fit.coeffs, y) - eval_quadratic(&ls, y)).abs())
        .fold(0.0, f64::max))
}

/// Random layered graph with at most seven nodes in total.
pub fn random_graph(seed: u64) -> SmoothingGraph {
    let mut r = rng(seed);
    let mut remaining = r.random_range(2..=7usize);
    let mut layers = Vec::new();
    let mut y = 0.0;
    while remaining > 0 {
        let k = r.random_range(1..=remaining.min(3));
        remaining -= k;
        y += r.random_range(5.0..20.0);
        layers.push((0..k).map(|_| (r.random_range(0.0..50.0), y)).collect());
    }
    SmoothingGraph::new(layers, r.random_range(0.0..5.0))
}

pub fn random_keypoints(seed: u64) -> Vec<Keypoint> {
    let mut r = rng(seed);
    let n = r.random_range(0..=40);
    let with_embed = r.random_bool(0.5);
    (0..n)
        .map(|_| {
            let mut k = Keypoint::at(r.random_range(0.0..100.0), r.random_range(0.0..100.0), 1.0);
            if with_embed {
                k.embedding = Some((0..3).map(|_| r.random_range(-1.0..1.0)).collect());
            }
            k
        })
        .collect()
}

fn brute_force_clusters(points: &[Keypoint], thr: f64, embed_weight: f64, min_size: usize) -> Vec<Vec<usize>> {
    let dist = |i: usize, j: usize| {
        let (a, b) = (&points[i], &points[j]);
        let spatial = ((a.u - b.u).powi(2) + (a.v - b.v).powi(2)).sqrt();
        let embed = match (&a.embedding, &b.embedding) {
            (Some(x), Some(y)) => x.iter().zip(y).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>().sqrt(),
            _ => 0.0,
        };
        spatial + embed_weight * embed
    };
    oracles::components(points.len(), dist, thr)
        .into_iter()
        .filter(|c| c.len() >= min_size)
        .collect()
}

pub const GEOMETRY_TRIALS: u64 = 100;
pub const RANSAC_TOL: f64 = 1e-3;
pub const RANSAC_REQUIRED: usize = 95;

pub fn geometry_suite() -> Outcome {
    let mut failures = Vec::new();
    let mut ransac_ok = 0;
    let mut ransac_errors = Vec::new();
    for seed in 0..GEOMETRY_TRIALS {
        match ransac_trial(seed) {
            Ok(gap) if gap <= RANSAC_TOL => ransac_ok += 1,
            Ok(gap) => ransac_errors.push(format!("seed {seed} gap {gap:.3e}")),
            Err(e) => ransac_errors.push(format!("seed {seed}: {e}")),
        }
    }
    if ransac_ok < RANSAC_REQUIRED {
        failures.push(format!("ransac {ransac_ok}/100 ({})", ransac_errors.join(", ")));
    }
    let mut path_ok = 0;
    for seed in 0..GEOMETRY_TRIALS {
        let g = random_graph(seed);
        match (shortest_path(&g), brute_force_path(&g)) {
            (Some((p, c)), Some((_, best))) if (c - best).abs() <= 1e-9 * best.max(1.0) && (g.path_cost(&p) - best).abs() <= 1e-9 * best.max(1.0) => {
                path_ok += 1
            }
            (a, b) => failures.push(format!("graph {seed}: dijkstra {a:?} vs exhaustive {b:?}")),
        }
    }
    let mut cluster_ok = 0;
    for seed in 0..GEOMETRY_TRIALS {
        let pts = random_keypoints(seed);
        let thr = 5.0 + (seed % 7) as f64 * 3.0;
        let ew = (seed % 3) as f64;
        let min_size = 1 + (seed % 3) as usize;
        let got = cluster_indices(&pts, thr, ew, min_size);
        let want = brute_force_clusters(&pts, thr, ew, min_size);
        if got == want {
            cluster_ok += 1;
        } else {
            failures.push(format!("points {seed}: {got:?} vs {want:?}"));
        }
    }
    Outcome::from_failures(
        failures,
        format!("ransac {ransac_ok}/100, dijkstra {path_ok}/100, clustering {cluster_ok}/100"),
    )
}

// ------------------------------------------------------------------ metrics

/// `(counts, accuracy, precision, recall, f1)` worked out by hand.
pub fn metric_cases() -> Vec<(ConfusionCounts, [f64; 4])> {
    let c = ConfusionCounts::new;
    vec![
        (c(8, 2, 2, 8), [16.0 / 20.0, 8.0 / 10.0, 8.0 / 10.0, 0.8]),
        (c(3, 1, 0, 0), [3.0 / 4.0, 3.0 / 4.0, 1.0, 6.0 / 7.0]),
        (c(1, 0, 3, 0), [1.0 / 4.0, 1.0, 1.0 / 4.0, 2.0 / 5.0]),
        (c(5, 0, 0, 5), [1.0, 1.0, 1.0, 1.0]),
        (c(0, 4, 6, 0), [0.0, 0.0, 0.0, 0.0]),
        // no positive predictions: precision 0 by convention
        (c(0, 0, 5, 5), [0.5, 0.0, 0.0, 0.0]),
        // no positive ground truth: recall 0 by convention
        (c(0, 3, 0, 7), [0.7, 0.0, 0.0, 0.0]),
        // only negatives
        (c(0, 0, 0, 9), [1.0, 0.0, 0.0, 0.0]),
        (c(2, 2, 2, 2), [0.5, 0.5, 0.5, 0.5]),
        (c(9, 1, 3, 7), [16.0 / 20.0, 9.0 / 10.0, 9.0 / 12.0, 18.0 / 22.0]),
        (c(1, 1, 0, 0), [0.5, 0.5, 1.0, 2.0 / 3.0]),
        (c(6, 0, 2, 1), [7.0 / 9.0, 1.0, 6.0 / 8.0, 12.0 / 14.0]),
    ]
}

/// Point-level cases on a three-row clip: `(prediction lanes, gt lanes, counts)`.
pub fn confusion_cases() -> Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>, ConfusionCounts)> {
    let a = ABSENT;
    vec![
        (vec![vec![10.0, 20.0, 30.0]], vec![vec![10.0, 20.0, 30.0]], ConfusionCounts::new(3, 0, 0, 0)),
        (vec![], vec![vec![10.0, 20.0, 30.0]], ConfusionCounts::new(0, 0, 3, 0)),
        (vec![vec![10.0, 20.0, 30.0]], vec![], ConfusionCounts::new(0, 3, 0, 0)),
        (vec![], vec![], ConfusionCounts::new(0, 0, 0, 3)),
        (vec![vec![10.0, 50.0, a]], vec![vec![12.0, 20.0, a]], ConfusionCounts::new(1, 1, 1, 1)),
        (
            vec![vec![10.0, 20.0, 30.0], vec![100.0, a, a]],
            vec![vec![14.0, 20.0, a]],
            ConfusionCounts::new(2, 2, 0, 0),
        ),
    ]
}

pub fn metric_suite() -> Outcome {
    let mut failures = Vec::new();
    let cases = metric_cases();
    for (i, (c, want)) in cases.iter().enumerate() {
        match metrics_from_counts(c) {
            Ok(m) => {
                let got = [m.accuracy, m.precision, m.recall, m.f1];
                if got != *want {
                    failures.push(format!("case {i} {c:?}: {got:?} != {want:?}"));
                }
            }
            Err(e) => failures.push(format!("case {i}: {e}")),
        }
    }
    if !matches!(metrics_from_counts(&ConfusionCounts::default()), Err(Error::UndefinedMetric(_))) {
        failures.push("empty counts are not reported as undefined".into());
    }
    let rows = vec![100.0, 200.0, 300.0];
    let conf = confusion_cases();
    for (i, (p, g, want)) in conf.iter().enumerate() {
        let pred = ClipAnnotation::new("c", rows.clone(), p.clone());
        let gt = ClipAnnotation::new("c", rows.clone(), g.clone());
        match point_confusion(&pred, &gt, 5.0) {
            Ok(got) if got == *want => {}
            other => failures.push(format!("confusion case {i}: {other:?} != {want:?}")),
        }
    }
    Outcome::from_failures(
        failures,
        format!(
            "{} count cases + undefined case + {} point-matching cases",
            cases.len(),
            conf.len()
        ),
    )
}

// ------------------------------------------------------------------ shapes

pub fn shape_suite() -> Outcome {
    let mut failures = Vec::new();
    let mut notes = Vec::new();
    let want = [(128, 256), (64, 128), (32, 64), (16, 32)];
    for e in [Experiment::Exp1, Experiment::Exp2] {
        let cfg = ModelConfig::preset(e, Scale::Full);
        match Model::new(cfg, 0).and_then(|(m, _)| m.trace([1, 3, 4, 256, 512])) {
            Ok(t) => {
                let got: Vec<(usize, usize)> = t.stages.iter().map(|s| (s[3], s[4])).collect();
                if got != want {
                    failures.push(format!("{} stage resolutions {got:?}", e.name()));
                }
            }
            Err(err) => failures.push(format!("{}: {err}", e.name())),
        }
    }
    for e in [Experiment::Exp1, Experiment::Exp2, Experiment::Exp3] {
        let cfg = ModelConfig::preset(e, Scale::Full);
        let mut full3d = cfg.clone();
        full3d.encoder.factorized = false;
        let res = Model::new(cfg, 0).and_then(|(m, store)| {
            let (m3, _) = Model::new(full3d, 0)?;
            Ok((m.count_macs([1, 3, 4, 256, 512])?, m3.count_macs([1, 3, 4, 256, 512])?, count_params(&store)))
        });
        match res {
            Ok((fact, full, params)) => {
                if fact >= full {
                    failures.push(format!("{} factorized MACs {fact} >= full {full}", e.name()));
                }
                if params >= 15_000_000 {
                    failures.push(format!("{} has {params} parameters", e.name()));
                }
                notes.push(format!("{} {:.2}M params, MACs {:.2}G vs {:.2}G", e.name(), params as f64 / 1e6, fact as f64 / 1e9, full as f64 / 1e9));
            }
            Err(err) => failures.push(format!("{}: {err}", e.name())),
        }
    }
    Outcome::from_failures(failures, format!("stages {want:?}; {}", notes.join("; ")))
}
