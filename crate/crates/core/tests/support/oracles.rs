//! Direct nested-loop reference implementations, written from the definitions
//! and sharing no code with the library kernels.

use lane3d::Tensor;

/// Dense `[n, c, t, h, w]` array in f64.
#[derive(Clone, Debug)]
pub struct Vol {
    pub shape: [usize; 5],
    pub data: Vec<f64>,
}

impl Vol {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_tensor<R: lane3d::Real>(t: &Tensor<R>) -> Self {
        let s = t.shape();
        Self {
            shape: [s[0], s[1], s[2], s[3], s[4]],
            data: t.data().iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn idx(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> usize {
        let [_, cc, tt, hh, ww] = self.shape;
        (((n * cc + c) * tt + t) * hh + h) * ww + w
    }

    pub fn get(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(n, c, t, h, w)]
    }

    pub fn add(&mut self, n: usize, c: usize, t: usize, h: usize, w: usize, v: f64) {
        let i = self.idx(n, c, t, h, w);
        self.data[i] += v;
    }
}

/// `y[n,o,t,h,w] = b[o] + Σ_{i,a,b,c} w[o,i,a,b,c] · x[n,i,t·s−p+a, h·s−p+b, w·s−p+c]`
/// with zero padding.
pub fn conv3d(x: &Vol, w: &Vol, bias: Option<&[f64]>, stride: [usize; 3], pad: [usize; 3]) -> Vol {
    let [n, ci, t, h, wd] = x.shape;
    let [co, _, kt, kh, kw] = w.shape;
    let out = |len: usize, k: usize, s: usize, p: usize| (len + 2 * p - k) / s + 1;
    let (ot, oh, ow) = (out(t, kt, stride[0], pad[0]), out(h, kh, stride[1], pad[1]), out(wd, kw, stride[2], pad[2]));
    let mut y = Vol::zeros([n, co, ot, oh, ow]);
    for b in 0..n {
        for o in 0..co {
            for zt in 0..ot {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let mut s = bias.map_or(0.0, |bb| bb[o]);
                        for i in 0..ci {
                            for a in 0..kt {
                                for bh in 0..kh {
                                    for c in 0..kw {
                                        let it = (zt * stride[0] + a) as isize - pad[0] as isize;
                                        let ih = (zh * stride[1] + bh) as isize - pad[1] as isize;
                                        let iw = (zw * stride[2] + c) as isize - pad[2] as isize;
                                        if it < 0 || ih < 0 || iw < 0 || it >= t as isize || ih >= h as isize || iw >= wd as isize {
                                            continue;
                                        }
                                        s += w.get(o, i, a, bh, c) * x.get(b, i, it as usize, ih as usize, iw as usize);
                                    }
                                }
                            }
                        }
                        let idx = y.idx(b, o, zt, zh, zw);
                        y.data[idx] = s;
                    }
                }
            }
        }
    }
    y
}

/// Scatter form: every input element adds `x · w[i,o,·]` to the output window it
/// maps to, `out[t·s − p + a] += …`; weight layout `[in, out, kt, kh, kw]`.
pub fn transposed_conv3d(x: &Vol, w: &Vol, bias: Option<&[f64]>, stride: [usize; 3], pad: [usize; 3]) -> Vol {
    let [n, ci, t, h, wd] = x.shape;
    let [_, co, kt, kh, kw] = w.shape;
    let full = |len: usize, k: usize, s: usize| (len - 1) * s + k;
    let (ft, fh, fw) = (full(t, kt, stride[0]), full(h, kh, stride[1]), full(wd, kw, stride[2]));
    let (ot, oh, ow) = (ft - 2 * pad[0], fh - 2 * pad[1], fw - 2 * pad[2]);
    let mut y = Vol::zeros([n, co, ot, oh, ow]);
    for b in 0..n {
        for i in 0..ci {
            for zt in 0..t {
                for zh in 0..h {
                    for zw in 0..wd {
                        let xv = x.get(b, i, zt, zh, zw);
                        for o in 0..co {
                            for a in 0..kt {
                                for bh in 0..kh {
                                    for c in 0..kw {
                                        let yt = (zt * stride[0] + a) as isize - pad[0] as isize;
                                        let yh = (zh * stride[1] + bh) as isize - pad[1] as isize;
                                        let yw = (zw * stride[2] + c) as isize - pad[2] as isize;
                                        if yt < 0 || yh < 0 || yw < 0 || yt >= ot as isize || yh >= oh as isize || yw >= ow as isize {
                                            continue;
                                        }
                                        y.add(b, o, yt as usize, yh as usize, yw as usize, xv * w.get(i, o, a, bh, c));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(bb) = bias {
        let [_, _, tt, hh, ww] = y.shape;
        for b in 0..n {
            for o in 0..co {
                for zt in 0..tt {
                    for zh in 0..hh {
                        for zw in 0..ww {
                            y.add(b, o, zt, zh, zw, bb[o]);
                        }
                    }
                }
            }
        }
    }
    y
}

/// Per-channel mean and biased variance over `(n, t, h, w)`.
pub fn channel_stats(x: &Vol) -> (Vec<f64>, Vec<f64>) {
    let [n, c, t, h, w] = x.shape;
    let count = (n * t * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            for zt in 0..t {
                for zh in 0..h {
                    for zw in 0..w {
                        s += x.get(b, ch, zt, zh, zw);
                    }
                }
            }
        }
        mean[ch] = s / count;
        let mut ss = 0.0;
        for b in 0..n {
            for zt in 0..t {
                for zh in 0..h {
                    for zw in 0..w {
                        ss += (x.get(b, ch, zt, zh, zw) - mean[ch]).powi(2);
                    }
                }
            }
        }
        var[ch] = ss / count;
    }
    (mean, var)
}

/// `γ (x − μ)/√(σ² + ε) + β` with the given statistics.
pub fn normalize(x: &Vol, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Vol {
    let mut y = x.clone();
    let [n, c, t, h, w] = x.shape;
    for b in 0..n {
        for ch in 0..c {
            for zt in 0..t {
                for zh in 0..h {
                    for zw in 0..w {
                        let i = y.idx(b, ch, zt, zh, zw);
                        y.data[i] = gamma[ch] * (x.data[i] - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch];
                    }
                }
            }
        }
    }
    y
}

/// `softmax_j(Σ_c q[c,i] k[c,j] / √d)` then `o[c,i] = Σ_j a[i,j] v[c,j]`,
/// positions flattened over `(t, h, w)`.
pub fn attend(q: &Vol, k: &Vol, v: &Vol) -> Vol {
    let [n, d, t, h, w] = q.shape;
    let c = v.shape[1];
    let l = t * h * w;
    let at = |x: &Vol, b: usize, ch: usize, p: usize| x.data[(b * x.shape[1] + ch) * l + p];
    let mut out = Vol::zeros(v.shape);
    for b in 0..n {
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| (0..d).map(|ch| at(q, b, ch, i) * at(k, b, ch, j)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for ch in 0..c {
                let s: f64 = (0..l).map(|j| e[j] / z * at(v, b, ch, j)).sum();
                out.data[(b * c + ch) * l + i] = s;
            }
        }
    }
    out
}

/// 1×1×1 projection `y[o] = b[o] + Σ_i w[o,i] x[i]`.
pub fn pointwise(x: &Vol, w: &Vol, b: &[f64]) -> Vol {
    conv3d(x, w, Some(b), [1; 3], [0; 3])
}

/// `x + γ · attend(Wq x, Wk x, Wv x)`.
pub fn self_attention(x: &Vol, wq: &Vol, bq: &[f64], wk: &Vol, bk: &[f64], wv: &Vol, bv: &[f64], gamma: f64) -> Vol {
    let o = attend(&pointwise(x, wq, bq), &pointwise(x, wk, bk), &pointwise(x, wv, bv));
    let mut y = x.clone();
    for (a, b) in y.data.iter_mut().zip(&o.data) {
        *a += gamma * b;
    }
    y
}

/// Mean over cells of `−α (1 − p_t)^γ ln p_t`.
pub fn focal(p: &[f64], target: &[f64], alpha: f64, gamma: f64) -> f64 {
    let mut s = 0.0;
    for (&pi, &ti) in p.iter().zip(target) {
        let pt = if ti == 1.0 { pi } else { 1.0 - pi };
        s += -alpha * (1.0 - pt).powf(gamma) * pt.ln();
    }
    s / p.len() as f64
}

/// Squared offset error summed over both channels of each valid cell, divided
/// by the number of valid cells. Layouts: `[b, 2, plane]` and `[b, plane]`.
pub fn offset_mse(pred: &[f64], target: &[f64], mask: &[f64], plane: usize) -> Option<f64> {
    let batch = mask.len() / plane;
    let mut s = 0.0;
    let mut n = 0usize;
    for b in 0..batch {
        for i in 0..plane {
            if mask[b * plane + i] > 0.0 {
                n += 1;
                for c in 0..2 {
                    let k = (b * 2 + c) * plane + i;
                    s += (pred[k] - target[k]).powi(2);
                }
            }
        }
    }
    (n > 0).then(|| s / n as f64)
}

/// Interval intersection and union lengths of `[a−e, a+e]` and `[b−e, b+e]`,
/// the union counted as the sum of both lengths minus the overlap.
pub fn interval_iou_parts(a: f64, b: f64, e: f64) -> (f64, f64) {
    let (lo, hi) = ((a - e).max(b - e), (a + e).min(b + e));
    let inter = (hi - lo).max(0.0);
    (inter, 2.0 * e + 2.0 * e - inter)
}

/// `Σ inter / Σ union` over rows present in both lanes.
pub fn line_iou(pred: &[Option<f64>], gt: &[Option<f64>], e: f64) -> f64 {
    let (mut i, mut u) = (0.0, 0.0);
    for r in 0..pred.len().min(gt.len()) {
        if let (Some(a), Some(b)) = (pred[r], gt[r]) {
            let (ii, uu) = interval_iou_parts(a, b, e);
            i += ii;
            u += uu;
        }
    }
    if u == 0.0 {
        0.0
    } else {
        i / u
    }
}

/// Map form of the LineIoU term: on each labelled row, the predicted position
/// is the confidence-weighted mean of cell centres `j + 0.5` over the cells
/// within `window` of the target cell; the loss is `1 − Σinter/Σunion` per
/// image, averaged over images that have labelled rows.
pub fn lineiou_map(conf: &[f64], h: usize, w: usize, lanes: &[Vec<Vec<(usize, f64)>>], e: f64, window: usize) -> f64 {
    let mut total = 0.0;
    let mut counted = 0;
    for (b, image) in lanes.iter().enumerate() {
        let (mut inter, mut union) = (0.0, 0.0);
        let mut any = false;
        for lane in image {
            for &(r, gx) in lane {
                any = true;
                let c = (gx.floor() as isize).clamp(0, w as isize - 1);
                let (mut s, mut sx) = (0.0, 0.0);
                for j in 0..w as isize {
                    if (j - c).abs() <= window as isize {
                        let p = conf[b * h * w + r * w + j as usize];
                        s += p;
                        sx += p * (j as f64 + 0.5);
                    }
                }
                let (i, u) = interval_iou_parts(sx / s, gx, e);
                inter += i;
                union += u;
            }
        }
        if any {
            counted += 1;
            total += 1.0 - inter / union;
        }
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

/// Discriminative loss per image: pull = mean over instances of the mean over
/// members of `max(0, ‖μ − e‖ − δv)²`; push = mean over ordered instance pairs
/// of `max(0, δd − ‖μ_a − μ_b‖)²`; both averaged over the batch.
pub fn embedding(emb: &[f64], labels: &[u32], dim: usize, plane: usize, dv: f64, dd: f64) -> (f64, f64) {
    let batch = labels.len() / plane;
    let (mut pull, mut push) = (0.0, 0.0);
    for b in 0..batch {
        let mut ids: Vec<u32> = labels[b * plane..(b + 1) * plane].iter().copied().filter(|&l| l > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            continue;
        }
        let e = |i: usize, c: usize| emb[b * dim * plane + c * plane + i];
        let mut means = Vec::new();
        let mut img_pull = 0.0;
        for &id in &ids {
            let members: Vec<usize> = (0..plane).filter(|&i| labels[b * plane + i] == id).collect();
            let mu: Vec<f64> = (0..dim).map(|c| members.iter().map(|&i| e(i, c)).sum::<f64>() / members.len() as f64).collect();
            let mut s = 0.0;
            for &i in &members {
                let d = (0..dim).map(|c| (mu[c] - e(i, c)).powi(2)).sum::<f64>().sqrt();
                s += (d - dv).max(0.0).powi(2);
            }
            img_pull += s / members.len() as f64;
            means.push(mu);
        }
        pull += img_pull / ids.len() as f64;
        let k = means.len();
        if k > 1 {
            let mut s = 0.0;
            for a in 0..k {
                for c in 0..k {
                    if a != c {
                        let d = (0..dim).map(|z| (means[a][z] - means[c][z]).powi(2)).sum::<f64>().sqrt();
                        s += (dd - d).max(0.0).powi(2);
                    }
                }
            }
            push += s / (k * (k - 1)) as f64;
        }
    }
    (pull / batch as f64, push / batch as f64)
}

/// Least-squares `x = a·y² + b·y + c` by Householder QR on the raw design
/// matrix, with columns scaled to unit norm.
pub fn lstsq_quadratic(points: &[(f64, f64)]) -> [f64; 3] {
    let m = points.len();
    let mut a: Vec<[f64; 3]> = points.iter().map(|&(_, y)| [y * y, y, 1.0]).collect();
    let mut rhs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let mut scale = [0.0; 3];
    for (j, s) in scale.iter_mut().enumerate() {
        *s = a.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt().max(1e-300);
        for r in a.iter_mut() {
            r[j] /= *s;
        }
    }
    for j in 0..3 {
        let norm = (j..m).map(|i| a[i][j] * a[i][j]).sum::<f64>().sqrt();
        let alpha = if a[j][j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (0..m).map(|i| if i < j { 0.0 } else { a[i][j] }).collect();
        v[j] -= alpha;
        let vv: f64 = v.iter().map(|x| x * x).sum();
        if vv == 0.0 {
            continue;
        }
        for k in j..3 {
            let dot: f64 = (j..m).map(|i| v[i] * a[i][k]).sum();
            for i in j..m {
                a[i][k] -= 2.0 * dot / vv * v[i];
            }
        }
        let dot: f64 = (j..m).map(|i| v[i] * rhs[i]).sum();
        for i in j..m {
            rhs[i] -= 2.0 * dot / vv * v[i];
        }
    }
    let mut x = [0.0; 3];
    for j in (0..3).rev() {
        let s: f64 = (j + 1..3).map(|k| a[j][k] * x[k]).sum();
        x[j] = (rhs[j] - s) / a[j][j];
    }
    [x[0] / scale[0], x[1] / scale[1], x[2] / scale[2]]
}

/// Connected components of the graph linking pairs at distance `≤ thr`, by
/// depth-first search; each component sorted, components by smallest member.
pub fn components(n: usize, dist: impl Fn(usize, usize) -> f64, thr: f64) -> Vec<Vec<usize>> {
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(i) = stack.pop() {
            comp.push(i);
            for j in 0..n {
                if !seen[j] && dist(i, j) <= thr {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out.sort_by_key(|c| c[0]);
    out
}
