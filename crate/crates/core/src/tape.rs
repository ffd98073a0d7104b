//! Operation tape for reverse-mode differentiation.
//!
//! Each recorded node stores its forward value, the indices of its inputs and
//! an analytic backward function. [`Tape::backward`] walks the nodes in reverse
//! recording order and accumulates gradients for every leaf that requires one.

use crate::error::{Error, Result};
use crate::ops::activation;
use crate::ops::conv::{self, ConvGeometry};
use crate::ops::norm::{self, BatchStats};
use crate::ops::resample;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs available to a backward function.
pub struct BackwardCtx<'a, R: Real> {
    pub upstream: &'a Tensor<R>,
    pub inputs: Vec<&'a Tensor<R>>,
    pub output: &'a Tensor<R>,
    /// Whether each input requires a gradient; `None` may be returned otherwise.
    pub needs: Vec<bool>,
}

pub type BackwardFn<R> = Box<dyn Fn(&BackwardCtx<'_, R>) -> Result<Vec<Option<Tensor<R>>>>>;

struct Node<R: Real> {
    value: Tensor<R>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<R>>,
    requires_grad: bool,
}

pub struct Tape<R: Real = f32> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<R: Real> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, var: Var) -> Option<&Tensor<R>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<R>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Training or inference behaviour for [`Tape::batch_norm`].
pub enum NormInput<'a> {
    Train { eps: f64 },
    Inference { mean: &'a [f64], var: &'a [f64], eps: f64 },
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<R> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records a node computed outside the tape with a caller-supplied backward.
    pub fn record(&mut self, value: Tensor<R>, parents: &[Var], backward: BackwardFn<R>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("tape node {}", self.nodes.len())));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagates from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<R>> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, has shape {:?}", root_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_value.shape(), R::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                upstream: &upstream,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
            };
            let parent_grads = backward(&ctx)?;
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[p].value.shape() {
                    return Err(Error::shape(
                        "backward",
                        format!(
                            "gradient {:?} for node of shape {:?}",
                            g.shape(),
                            self.nodes[p].value.shape()
                        ),
                    ));
                }
                match &mut grads[p] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // only leaves keep their gradients
        for (idx, g) in grads.iter_mut().enumerate() {
            if self.nodes[idx].backward.is_some() {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Option<Var>, g: ConvGeometry) -> Result<Var> {
        let y = conv::conv3d_forward(self.value(x), self.value(weight), bias.map(|b| self.value(b)), &g)?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.record(
            y,
            &parents,
            Box::new(move |ctx| {
                let grads = conv::conv3d_backward(ctx.inputs[0], ctx.inputs[1], &g, ctx.upstream, ctx.needs[0])?;
                let mut out = vec![grads.input, Some(grads.weight)];
                if ctx.inputs.len() == 3 {
                    out.push(Some(grads.bias));
                }
                Ok(out)
            }),
        )
    }

    pub fn transposed_conv3d(&mut self, x: Var, weight: Var, bias: Option<Var>, g: ConvGeometry) -> Result<Var> {
        let y = conv::transposed_conv3d_forward(self.value(x), self.value(weight), bias.map(|b| self.value(b)), &g)?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.record(
            y,
            &parents,
            Box::new(move |ctx| {
                let grads =
                    conv::transposed_conv3d_backward(ctx.inputs[0], ctx.inputs[1], &g, ctx.upstream, ctx.needs[0])?;
                let mut out = vec![grads.input, Some(grads.weight)];
                if ctx.inputs.len() == 3 {
                    out.push(Some(grads.bias));
                }
                Ok(out)
            }),
        )
    }

    /// Batch normalization; in training mode also returns the batch statistics
    /// so the caller can update running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormInput<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let channels = self.value(gamma).numel();
        let (mean, var, eps, stats, batch_statistics) = match mode {
            NormInput::Train { eps } => {
                let stats = norm::batch_stats(self.value(x), channels)?;
                (stats.mean.clone(), stats.var.clone(), eps, Some(stats), true)
            }
            NormInput::Inference { mean, var, eps } => (mean.to_vec(), var.to_vec(), eps, None, false),
        };
        let y = norm::normalize(self.value(x), self.value(gamma), self.value(beta), &mean, &var, eps)?;
        let v = self.record(
            y,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let g = norm::batch_norm_backward(
                    ctx.inputs[0],
                    ctx.inputs[1],
                    &mean,
                    &var,
                    eps,
                    ctx.upstream,
                    batch_statistics,
                )?;
                Ok(vec![Some(g.input), Some(g.gamma), Some(g.beta)])
            }),
        )?;
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = activation::relu(self.value(x));
        self.record(
            y,
            &[x],
            Box::new(|ctx| Ok(vec![Some(activation::relu_backward(ctx.inputs[0], ctx.upstream))])),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let y = activation::leaky_relu(self.value(x), slope);
        self.record(
            y,
            &[x],
            Box::new(move |ctx| {
                Ok(vec![Some(activation::leaky_relu_backward(ctx.inputs[0], slope, ctx.upstream))])
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = activation::sigmoid(self.value(x));
        self.record(
            y,
            &[x],
            Box::new(|ctx| Ok(vec![Some(activation::sigmoid_backward(ctx.output, ctx.upstream))])),
        )
    }

    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if p == 0.0 {
            return Ok(x);
        }
        let mask = activation::dropout_mask::<R>(self.value(x).numel(), p, seed)?;
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
        self.record(
            y,
            &[x],
            Box::new(move |ctx| {
                let mut g = ctx.upstream.clone();
                g.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
                Ok(vec![Some(g)])
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        self.record(
            y,
            &[a, b],
            Box::new(|ctx| Ok(vec![Some(ctx.upstream.clone()), Some(ctx.upstream.clone())])),
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = R::lit(factor);
        let y = self.value(x).scale(f);
        self.record(y, &[x], Box::new(move |ctx| Ok(vec![Some(ctx.upstream.scale(f))])))
    }

    /// Sum of `factor_i · x_i` over single-element terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = R::zero();
        for &(v, w) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(Error::shape("weighted_sum", format!("term of shape {:?}", t.shape())));
            }
            total += t.item() * R::lit(w);
        }
        let weights: Vec<f64> = terms.iter().map(|&(_, w)| w).collect();
        let parents: Vec<Var> = terms.iter().map(|&(v, _)| v).collect();
        self.record(
            Tensor::scalar(total),
            &parents,
            Box::new(move |ctx| {
                let g = ctx.upstream.item();
                Ok(ctx
                    .inputs
                    .iter()
                    .zip(&weights)
                    .map(|(inp, &w)| Some(Tensor::full(inp.shape(), g * R::lit(w))))
                    .collect())
            }),
        )
    }

    pub fn upsample_nearest(&mut self, x: Var, factors: [usize; 3]) -> Result<Var> {
        let y = resample::upsample_nearest(self.value(x), factors)?;
        self.record(
            y,
            &[x],
            Box::new(move |ctx| {
                Ok(vec![Some(resample::upsample_nearest_backward(
                    ctx.inputs[0].shape(),
                    factors,
                    ctx.upstream,
                )?)])
            }),
        )
    }

    pub fn temporal_mean(&mut self, x: Var) -> Result<Var> {
        if self.value(x).dim(2) == 1 {
            return Ok(x);
        }
        let y = resample::temporal_mean(self.value(x))?;
        self.record(
            y,
            &[x],
            Box::new(|ctx| {
                Ok(vec![Some(resample::temporal_mean_backward(ctx.inputs[0].shape(), ctx.upstream)?)])
            }),
        )
    }

    /// Channel slice `[from, to)` of a rank-5 tensor.
    pub fn channels(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let [n, c, t, h, w] = self.value(x).dims5("channels")?;
        if from >= to || to > c {
            return Err(Error::InvalidArgument(format!("channel range {from}..{to} of {c}")));
        }
        let vol = t * h * w;
        let k = to - from;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * k * vol);
        for b in 0..n {
            data.extend_from_slice(&src[(b * c + from) * vol..(b * c + to) * vol]);
        }
        let y = Tensor::from_vec(&[n, k, t, h, w], data)?;
        self.record(
            y,
            &[x],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(ctx.inputs[0].shape());
                let up = ctx.upstream.data();
                let gd = g.data_mut();
                for b in 0..n {
                    gd[(b * c + from) * vol..(b * c + to) * vol]
                        .copy_from_slice(&up[b * k * vol..(b + 1) * k * vol]);
                }
                Ok(vec![Some(g)])
            }),
        )
    }

    /// Sum of every element, as a single-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.record(
            Tensor::scalar(s),
            &[x],
            Box::new(|ctx| Ok(vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.upstream.item()))])),
        )
    }

    /// `Σ x ⊙ weights` for a fixed weight tensor (random projections in gradient checks).
    pub fn project(&mut self, x: Var, weights: Tensor<R>) -> Result<Var> {
        if weights.shape() != self.value(x).shape() {
            return Err(Error::shape("project", "weights must match input shape"));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        self.record(
            Tensor::scalar(s),
            &[x],
            Box::new(move |ctx| Ok(vec![Some(weights.scale(ctx.upstream.item()))])),
        )
    }
}
