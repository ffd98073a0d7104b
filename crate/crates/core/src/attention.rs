//! Scaled dot-product self-attention over flattened `T·H·W` positions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::conv::{conv3d_forward, ConvGeometry};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default cap on the number of elements of one `L×L` score matrix.
pub const DEFAULT_SCORE_BUDGET: usize = 1 << 26;

/// Projection weights for one attention block. Q and K map `C → d_k`, V maps `C → C`.
#[derive(Clone, Debug)]
pub struct AttentionParams<R: Real = f32> {
    pub wq: Tensor<R>,
    pub bq: Tensor<R>,
    pub wk: Tensor<R>,
    pub bk: Tensor<R>,
    pub wv: Tensor<R>,
    pub bv: Tensor<R>,
    /// Residual blend: `out = x + gamma · attended`.
    pub gamma: R,
}

impl<R: Real> AttentionParams<R> {
    /// Zero query/key projections, identity value projection, `gamma = 0`.
    pub fn new(channels: usize, d_k: usize) -> Result<Self> {
        if channels == 0 || d_k == 0 {
            return Err(Error::InvalidArgument(format!(
                "attention needs channels ≥ 1 and d_k ≥ 1, got {channels} and {d_k}"
            )));
        }
        let mut wv = Tensor::zeros(&[channels, channels, 1, 1, 1]);
        for c in 0..channels {
            wv.data_mut()[c * channels + c] = R::one();
        }
        Ok(Self {
            wq: Tensor::zeros(&[d_k, channels, 1, 1, 1]),
            bq: Tensor::zeros(&[d_k]),
            wk: Tensor::zeros(&[d_k, channels, 1, 1, 1]),
            bk: Tensor::zeros(&[d_k]),
            wv,
            bv: Tensor::zeros(&[channels]),
            gamma: R::zero(),
        })
    }

    pub fn random(channels: usize, d_k: usize, gamma: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::new(channels, d_k)?;
        let std = (1.0 / channels as f64).sqrt();
        p.wq = Tensor::randn(p.wq.shape(), std, rng);
        p.wk = Tensor::randn(p.wk.shape(), std, rng);
        p.wv = Tensor::randn(p.wv.shape(), std, rng);
        p.bq = Tensor::randn(&[d_k], 0.1, rng);
        p.bk = Tensor::randn(&[d_k], 0.1, rng);
        p.bv = Tensor::randn(&[channels], 0.1, rng);
        p.gamma = R::lit(gamma);
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.wv.dim(0)
    }

    pub fn d_k(&self) -> usize {
        self.wq.dim(0)
    }

    fn validate(&self) -> Result<()> {
        let (c, d) = (self.channels(), self.d_k());
        let ok = self.wq.shape() == [d, c, 1, 1, 1]
            && self.wk.shape() == [d, c, 1, 1, 1]
            && self.wv.shape() == [c, c, 1, 1, 1]
            && self.bq.shape() == [d]
            && self.bk.shape() == [d]
            && self.bv.shape() == [c];
        if ok {
            Ok(())
        } else {
            Err(Error::shape("self_attention", "inconsistent projection shapes"))
        }
    }
}

fn check_budget(l: usize, budget: usize) -> Result<()> {
    let required = l.saturating_mul(l);
    if required > budget {
        return Err(Error::Capacity {
            op: "self_attention",
            required,
            budget,
        });
    }
    Ok(())
}

/// Row-softmax of `Q̂ᵀK̂/√d` for one batch item; `q`, `k` are `[d, L]` channel-major.
pub fn attention_weights<R: Real>(q: &[R], k: &[R], d: usize, l: usize) -> Vec<R> {
    let mut a = vec![R::zero(); l * l];
    let scale = R::lit(1.0 / (d as f64).sqrt());
    // S[i, j] = Σ_c q[c, i] k[c, j]
    R::gemm(l, d, l, scale, q, (1, l as isize), k, (l as isize, 1), R::zero(), &mut a, (l as isize, 1));
    for row in a.chunks_mut(l) {
        let m = row.iter().copied().fold(R::neg_infinity(), R::max);
        let mut s = R::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = R::one() / s;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    a
}

fn attention_dims<R: Real>(q: &Tensor<R>, k: &Tensor<R>, v: &Tensor<R>) -> Result<[usize; 4]> {
    let [n, d, t, h, w] = q.dims5("attend")?;
    let [nv, c, tv, hv, wv] = v.dims5("attend")?;
    if k.shape() != q.shape() || [nv, tv, hv, wv] != [n, t, h, w] {
        return Err(Error::shape(
            "attend",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    Ok([n, d, c, t * h * w])
}

/// `softmax(QᵀK/√d) V` per batch item, with positions flattened over `T·H·W`.
pub fn attend<R: Real>(q: &Tensor<R>, k: &Tensor<R>, v: &Tensor<R>, budget: usize) -> Result<Tensor<R>> {
    let [n, d, c, l] = attention_dims(q, k, v)?;
    check_budget(l, budget)?;
    let mut out = Tensor::zeros(v.shape());
    for b in 0..n {
        let qb = &q.data()[b * d * l..][..d * l];
        let kb = &k.data()[b * d * l..][..d * l];
        let vb = &v.data()[b * c * l..][..c * l];
        let a = attention_weights(qb, kb, d, l);
        let ob = &mut out.data_mut()[b * c * l..][..c * l];
        // O[c, i] = Σ_j V[c, j] A[i, j]
        R::gemm(c, l, l, R::one(), vb, (l as isize, 1), &a, (1, l as isize), R::zero(), ob, (l as isize, 1));
    }
    Ok(out)
}

pub struct AttendGrads<R: Real> {
    pub q: Tensor<R>,
    pub k: Tensor<R>,
    pub v: Tensor<R>,
}

/// Gradients of [`attend`]; the weight matrix is recomputed rather than stored.
pub fn attend_backward<R: Real>(
    q: &Tensor<R>,
    k: &Tensor<R>,
    v: &Tensor<R>,
    upstream: &Tensor<R>,
) -> Result<AttendGrads<R>> {
    let [n, d, c, l] = attention_dims(q, k, v)?;
    if upstream.shape() != v.shape() {
        return Err(Error::shape("attend_backward", "upstream shape mismatch"));
    }
    let mut gq = Tensor::zeros(q.shape());
    let mut gk = Tensor::zeros(k.shape());
    let mut gv = Tensor::zeros(v.shape());
    let scale = R::lit(1.0 / (d as f64).sqrt());
    let li = l as isize;
    let mut da = vec![R::zero(); l * l];
    for b in 0..n {
        let qb = &q.data()[b * d * l..][..d * l];
        let kb = &k.data()[b * d * l..][..d * l];
        let vb = &v.data()[b * c * l..][..c * l];
        let gb = &upstream.data()[b * c * l..][..c * l];
        let a = attention_weights(qb, kb, d, l);
        // dV = dO · A
        let gvb = &mut gv.data_mut()[b * c * l..][..c * l];
        R::gemm(c, l, l, R::one(), gb, (li, 1), &a, (li, 1), R::zero(), gvb, (li, 1));
        // dA = dOᵀ · V
        R::gemm(l, c, l, R::one(), gb, (1, li), vb, (li, 1), R::zero(), &mut da, (li, 1));
        // dS = A ⊙ (dA − rowsum(dA ⊙ A))
        for (arow, drow) in a.chunks(l).zip(da.chunks_mut(l)) {
            let dot: R = arow.iter().zip(drow.iter()).map(|(&x, &y)| x * y).sum();
            drow.iter_mut().zip(arow).for_each(|(g, &x)| *g = x * (*g - dot));
        }
        // dQ = K · dSᵀ · scale ; dK = Q · dS · scale
        let gqb = &mut gq.data_mut()[b * d * l..][..d * l];
        R::gemm(d, l, l, scale, kb, (li, 1), &da, (1, li), R::zero(), gqb, (li, 1));
        let gkb = &mut gk.data_mut()[b * d * l..][..d * l];
        R::gemm(d, l, l, scale, qb, (li, 1), &da, (li, 1), R::zero(), gkb, (li, 1));
    }
    Ok(AttendGrads { q: gq, k: gk, v: gv })
}

/// Full block: 1×1×1 projections, attention, residual blend.
pub fn self_attention<R: Real>(features: &Tensor<R>, params: &AttentionParams<R>, budget: usize) -> Result<Tensor<R>> {
    params.validate()?;
    let c = features.dims5("self_attention")?[1];
    if c != params.channels() {
        return Err(Error::shape(
            "self_attention",
            format!("input has {c} channels, projections expect {}", params.channels()),
        ));
    }
    let g = ConvGeometry::pointwise();
    let q = conv3d_forward(features, &params.wq, Some(&params.bq), &g)?;
    let k = conv3d_forward(features, &params.wk, Some(&params.bk), &g)?;
    let v = conv3d_forward(features, &params.wv, Some(&params.bv), &g)?;
    let o = attend(&q, &k, &v, budget)?;
    features.zip_map(&o, |x, a| x + params.gamma * a)
}

impl<R: Real> Tape<R> {
    /// Differentiable [`attend`].
    pub fn attend(&mut self, q: Var, k: Var, v: Var, budget: usize) -> Result<Var> {
        let y = attend(self.value(q), self.value(k), self.value(v), budget)?;
        self.record(
            y,
            &[q, k, v],
            Box::new(|ctx| {
                let g = attend_backward(ctx.inputs[0], ctx.inputs[1], ctx.inputs[2], ctx.upstream)?;
                Ok(vec![Some(g.q), Some(g.k), Some(g.v)])
            }),
        )
    }

    /// `x · s` for a single-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar", "scale must have one element"));
        }
        let sv = self.value(s).item();
        let y = self.value(x).scale(sv);
        self.record(
            y,
            &[x, s],
            Box::new(|ctx| {
                let sv = ctx.inputs[1].item();
                let gs: R = ctx.upstream.data().iter().zip(ctx.inputs[0].data()).map(|(&g, &x)| g * x).sum();
                Ok(vec![
                    Some(ctx.upstream.scale(sv)),
                    Some(Tensor::full(ctx.inputs[1].shape(), gs)),
                ])
            }),
        )
    }
}
