//! Parameterized layers bound to a [`ParamStore`], each with a tape forward
//! and a shape/MAC trace that mirrors it without evaluating anything.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::conv::{conv_macs, factorize_geometry, transposed_conv_macs, ConvGeometry};
use crate::ops::norm::{DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::params::{ParamId, ParamStore, Session, StatUpdate};
use crate::real::Real;
use crate::tape::{NormInput, Var};
use crate::tensor::Tensor;

/// Shape propagation and multiply-accumulate tally.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub macs: u64,
}

pub type Shape5 = [usize; 5];

pub(crate) fn shape5(s: &[usize]) -> Shape5 {
    [s[0], s[1], s[2], s[3], s[4]]
}

/// Weight initialization.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Normal with `std = sqrt(2 / fan_in)`.
    Kaiming,
    Normal(f64),
    Zeros,
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geometry: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
    pub transposed: bool,
}

fn init_tensor(shape: &[usize], fan_in: usize, init: Init, rng: &mut impl Rng) -> Tensor<f32> {
    match init {
        Init::Kaiming => Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng),
        Init::Normal(std) => Tensor::randn(shape, std, rng),
        Init::Zeros => Tensor::zeros(shape),
    }
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<f32>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        bias: bool,
        init: Init,
    ) -> Self {
        let k = geometry.kernel;
        let shape = [out_channels, in_channels, k[0], k[1], k[2]];
        let w = init_tensor(&shape, in_channels * geometry.kernel_volume(), init, rng);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true));
        Self {
            weight,
            bias,
            geometry,
            in_channels,
            out_channels,
            transposed: false,
        }
    }

    /// Transposed convolution; weights are `[in, out, kt, kh, kw]`.
    pub fn transposed(
        store: &mut ParamStore<f32>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
    ) -> Self {
        let k = geometry.kernel;
        let shape = [in_channels, out_channels, k[0], k[1], k[2]];
        let taps = geometry.kernel_volume() / geometry.stride.iter().product::<usize>().max(1);
        let w = init_tensor(&shape, in_channels * taps.max(1), Init::Kaiming, rng);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true));
        Self {
            weight,
            bias,
            geometry,
            in_channels,
            out_channels,
            transposed: true,
        }
    }

    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        if self.transposed {
            s.tape.transposed_conv3d(x, w, b, self.geometry)
        } else {
            s.tape.conv3d(x, w, b, self.geometry)
        }
    }

    pub fn trace(&self, t: &mut Trace, x: Shape5) -> Result<Shape5> {
        if x[1] != self.in_channels {
            return Err(Error::shape(
                "conv3d",
                format!("input has {} channels, layer expects {}", x[1], self.in_channels),
            ));
        }
        let ext = [x[2], x[3], x[4]];
        let out = if self.transposed {
            t.macs += transposed_conv_macs(x[0], self.in_channels, self.out_channels, &self.geometry, ext);
            self.geometry.transposed_output_extent(ext)?
        } else {
            t.macs += conv_macs(x[0], self.in_channels, self.out_channels, &self.geometry, ext)?;
            self.geometry.output_extent(ext)?
        };
        Ok([x[0], self.out_channels, out[0], out[1], out[2]])
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore<f32>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    /// Training sessions normalize with batch statistics and queue a running-stat
    /// update; inference sessions use the stored running statistics.
    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        if s.training() {
            let (y, stats) = s.tape.batch_norm(x, g, b, NormInput::Train { eps: self.eps })?;
            if let Some(stats) = stats {
                s.push_stat_update(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                    momentum: self.momentum,
                });
            }
            Ok(y)
        } else {
            let mean: Vec<f64> = s.store().get(self.running_mean).data().iter().map(|v| v.as_f64()).collect();
            let var: Vec<f64> = s.store().get(self.running_var).data().iter().map(|v| v.as_f64()).collect();
            let (y, _) = s.tape.batch_norm(
                x,
                g,
                b,
                NormInput::Inference {
                    mean: &mean,
                    var: &var,
                    eps: self.eps,
                },
            )?;
            Ok(y)
        }
    }
}

/// One convolution of the encoder: a full 3D kernel, or the (2+1)D split
/// `spatial (1,kh,kw) → BN → ReLU → temporal (kt,1,1)`.
#[derive(Clone, Debug)]
pub enum ConvUnit {
    Full(ConvLayer),
    Factorized {
        spatial: ConvLayer,
        norm: Option<BatchNormLayer>,
        temporal: Option<ConvLayer>,
    },
}

impl ConvUnit {
    /// `mid` is the width between the spatial and temporal passes.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<f32>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        mid: usize,
        geometry: ConvGeometry,
        factorized: bool,
    ) -> Self {
        if !factorized {
            return ConvUnit::Full(ConvLayer::new(
                store,
                rng,
                name,
                in_channels,
                out_channels,
                geometry,
                false,
                Init::Kaiming,
            ));
        }
        let (sg, tg) = factorize_geometry(&geometry);
        match tg {
            None => ConvUnit::Factorized {
                spatial: ConvLayer::new(
                    store,
                    rng,
                    &format!("{name}.spatial"),
                    in_channels,
                    out_channels,
                    sg,
                    false,
                    Init::Kaiming,
                ),
                norm: None,
                temporal: None,
            },
            Some(tg) => {
                let spatial = ConvLayer::new(
                    store,
                    rng,
                    &format!("{name}.spatial"),
                    in_channels,
                    mid,
                    sg,
                    false,
                    Init::Kaiming,
                );
                let norm = BatchNormLayer::new(store, &format!("{name}.mid_norm"), mid);
                let temporal = ConvLayer::new(
                    store,
                    rng,
                    &format!("{name}.temporal"),
                    mid,
                    out_channels,
                    tg,
                    false,
                    Init::Kaiming,
                );
                ConvUnit::Factorized {
                    spatial,
                    norm: Some(norm),
                    temporal: Some(temporal),
                }
            }
        }
    }

    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: Var) -> Result<Var> {
        match self {
            ConvUnit::Full(c) => c.forward(s, x),
            ConvUnit::Factorized { spatial, norm, temporal } => {
                let mut y = spatial.forward(s, x)?;
                if let Some(n) = norm {
                    y = n.forward(s, y)?;
                    y = s.tape.relu(y)?;
                }
                match temporal {
                    Some(t) => t.forward(s, y),
                    None => Ok(y),
                }
            }
        }
    }

    pub fn trace(&self, t: &mut Trace, x: Shape5) -> Result<Shape5> {
        match self {
            ConvUnit::Full(c) => c.trace(t, x),
            ConvUnit::Factorized { spatial, temporal, .. } => {
                let y = spatial.trace(t, x)?;
                match temporal {
                    Some(tc) => tc.trace(t, y),
                    None => Ok(y),
                }
            }
        }
    }
}

/// `relu(BN(unit₂(relu(BN(unit₁(x))))) + shortcut(x))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub unit1: ConvUnit,
    pub norm1: BatchNormLayer,
    pub unit2: ConvUnit,
    pub norm2: BatchNormLayer,
    pub shortcut: Option<(ConvLayer, BatchNormLayer)>,
}

impl ResidualBlock {
    /// `stride` is the spatial stride applied by the first unit.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<f32>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        temporal_kernel: usize,
        factorized: bool,
    ) -> Self {
        let kt = temporal_kernel;
        let g1 = ConvGeometry::new([kt, 3, 3], [1, stride, stride], [kt / 2, 1, 1]);
        let g2 = ConvGeometry::same([kt, 3, 3]);
        let unit1 = ConvUnit::new(store, rng, &format!("{name}.conv1"), in_channels, out_channels, in_channels, g1, factorized);
        let norm1 = BatchNormLayer::new(store, &format!("{name}.norm1"), out_channels);
        let unit2 = ConvUnit::new(store, rng, &format!("{name}.conv2"), out_channels, out_channels, out_channels, g2, factorized);
        let norm2 = BatchNormLayer::new(store, &format!("{name}.norm2"), out_channels);
        let shortcut = (stride != 1 || in_channels != out_channels).then(|| {
            let g = ConvGeometry::new([1, 1, 1], [1, stride, stride], [0, 0, 0]);
            (
                ConvLayer::new(store, rng, &format!("{name}.shortcut"), in_channels, out_channels, g, false, Init::Kaiming),
                BatchNormLayer::new(store, &format!("{name}.shortcut_norm"), out_channels),
            )
        });
        Self {
            unit1,
            norm1,
            unit2,
            norm2,
            shortcut,
        }
    }

    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: Var) -> Result<Var> {
        let mut y = self.unit1.forward(s, x)?;
        y = self.norm1.forward(s, y)?;
        y = s.tape.relu(y)?;
        y = self.unit2.forward(s, y)?;
        y = self.norm2.forward(s, y)?;
        let sc = match &self.shortcut {
            Some((conv, norm)) => {
                let z = conv.forward(s, x)?;
                norm.forward(s, z)?
            }
            None => x,
        };
        let sum = s.tape.add(y, sc)?;
        s.tape.relu(sum)
    }

    pub fn trace(&self, t: &mut Trace, x: Shape5) -> Result<Shape5> {
        let y = self.unit1.trace(t, x)?;
        let y = self.unit2.trace(t, y)?;
        if let Some((conv, _)) = &self.shortcut {
            let z = conv.trace(t, x)?;
            if z != y {
                return Err(Error::shape("residual", format!("branch {y:?} vs shortcut {z:?}")));
            }
        }
        Ok(y)
    }
}

/// Single-head attention with 1×1×1 projections and a learnable residual scale.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub wq: ConvLayer,
    pub wk: ConvLayer,
    pub wv: ConvLayer,
    pub gamma: ParamId,
    pub budget: usize,
}

impl AttentionLayer {
    pub fn new(store: &mut ParamStore<f32>, rng: &mut impl Rng, name: &str, channels: usize, d_k: usize, budget: usize) -> Self {
        let g = ConvGeometry::pointwise();
        let std = (1.0 / channels as f64).sqrt();
        Self {
            wq: ConvLayer::new(store, rng, &format!("{name}.query"), channels, d_k, g, true, Init::Normal(std)),
            wk: ConvLayer::new(store, rng, &format!("{name}.key"), channels, d_k, g, true, Init::Normal(std)),
            wv: ConvLayer::new(store, rng, &format!("{name}.value"), channels, channels, g, true, Init::Normal(std)),
            gamma: store.add(format!("{name}.gamma"), Tensor::zeros(&[1]), true),
            budget,
        }
    }

    pub fn forward<R: Real>(&self, s: &mut Session<'_, R>, x: Var) -> Result<Var> {
        let q = self.wq.forward(s, x)?;
        let k = self.wk.forward(s, x)?;
        let v = self.wv.forward(s, x)?;
        let o = s.tape.attend(q, k, v, self.budget)?;
        let g = s.param(self.gamma);
        let scaled = s.tape.mul_scalar(o, g)?;
        s.tape.add(x, scaled)
    }

    pub fn trace(&self, t: &mut Trace, x: Shape5) -> Result<Shape5> {
        let q = self.wq.trace(t, x)?;
        self.wk.trace(t, x)?;
        self.wv.trace(t, x)?;
        let l = (x[2] * x[3] * x[4]) as u64;
        let required = (l * l) as usize;
        if required > self.budget {
            return Err(Error::Capacity {
                op: "self_attention",
                required,
                budget: self.budget,
            });
        }
        // scores plus weighted sum of values
        t.macs += x[0] as u64 * l * l * (q[1] as u64 + x[1] as u64);
        Ok(x)
    }
}
