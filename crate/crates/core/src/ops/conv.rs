//! 3D convolution, its transpose, and the (2+1)D factorized variant.
//!
//! Every kernel lowers one batch item to a column matrix (`im2col`) and runs a
//! single GEMM. Batch items are processed in parallel; reductions across the
//! batch are summed in index order so results do not depend on scheduling.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Kernel extents, strides and zero padding along `(T, H, W)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Unit-stride convolution with "same" padding for odd kernels.
    pub fn same(kernel: [usize; 3]) -> Self {
        Self::new(kernel, [1; 3], [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2])
    }

    pub fn pointwise() -> Self {
        Self::new([1; 3], [1; 3], [0; 3])
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "kernel {:?} and stride {:?} must be positive",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }

    /// `floor((extent + 2·pad − kernel) / stride) + 1` per axis.
    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return Err(Error::shape(
                    "conv3d",
                    format!(
                        "axis {a}: padded extent {padded} smaller than kernel {}",
                        self.kernel[a]
                    ),
                ));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// `(in − 1)·stride − 2·pad + kernel` per axis.
    pub fn transposed_output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a].max(1) - 1) * self.stride[a] + self.kernel[a];
            if input[a] == 0 || full <= 2 * self.padding[a] {
                return Err(Error::shape(
                    "transposed_conv3d",
                    format!("axis {a}: input {} yields empty output", input[a]),
                ));
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }
}

/// A full 3D convolution: geometry plus weights `[out, in, kt, kh, kw]` and bias `[out]`.
#[derive(Clone, Debug)]
pub struct Conv3d<R: Real = f32> {
    pub geometry: ConvGeometry,
    pub weight: Tensor<R>,
    pub bias: Tensor<R>,
}

impl<R: Real> Conv3d<R> {
    pub fn new(geometry: ConvGeometry, weight: Tensor<R>, bias: Tensor<R>) -> Result<Self> {
        geometry.validate()?;
        let ws = weight.shape();
        if ws.len() != 5 || ws[2..] != geometry.kernel {
            return Err(Error::shape(
                "conv3d",
                format!("weight shape {ws:?} inconsistent with kernel {:?}", geometry.kernel),
            ));
        }
        if bias.shape() != [ws[0]] {
            return Err(Error::shape(
                "conv3d",
                format!("bias shape {:?} for {} output channels", bias.shape(), ws[0]),
            ));
        }
        Ok(Self {
            geometry,
            weight,
            bias,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn forward(&self, input: &Tensor<R>) -> Result<Tensor<R>> {
        conv3d_forward(input, &self.weight, Some(&self.bias), &self.geometry)
    }
}

/// Convolution specification: a full 3D kernel, or the (2+1)D split into a
/// spatial `(1, kh, kw)` pass followed by a temporal `(kt, 1, 1)` pass.
#[derive(Clone, Debug)]
pub enum ConvSpec<R: Real = f32> {
    Full(Conv3d<R>),
    Factorized { spatial: Conv3d<R>, temporal: Option<Conv3d<R>> },
}

impl<R: Real> ConvSpec<R> {
    pub fn in_channels(&self) -> usize {
        match self {
            ConvSpec::Full(c) => c.in_channels(),
            ConvSpec::Factorized { spatial, .. } => spatial.in_channels(),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            ConvSpec::Full(c) => c.out_channels(),
            ConvSpec::Factorized { spatial, temporal } => temporal
                .as_ref()
                .map_or(spatial.out_channels(), |t| t.out_channels()),
        }
    }

    pub fn is_factorized(&self) -> bool {
        matches!(self, ConvSpec::Factorized { .. })
    }

    /// Spatial pass then temporal pass (no intermediate nonlinearity at this level).
    pub fn forward(&self, input: &Tensor<R>) -> Result<Tensor<R>> {
        let [_, c, ..] = input.dims5("conv3d")?;
        if c != self.in_channels() {
            return Err(Error::shape(
                "conv3d",
                format!("input has {c} channels, spec expects {}", self.in_channels()),
            ));
        }
        match self {
            ConvSpec::Full(conv) => conv.forward(input),
            ConvSpec::Factorized { spatial, temporal } => {
                let mid = spatial.forward(input)?;
                match temporal {
                    Some(t) => t.forward(&mid),
                    None => Ok(mid),
                }
            }
        }
    }

    /// Multiply-accumulate count for one application to an input of `input` extents.
    pub fn macs(&self, batch: usize, input: [usize; 3]) -> Result<u64> {
        match self {
            ConvSpec::Full(c) => conv_macs(batch, c.in_channels(), c.out_channels(), &c.geometry, input),
            ConvSpec::Factorized { spatial, temporal } => {
                let mut total = conv_macs(
                    batch,
                    spatial.in_channels(),
                    spatial.out_channels(),
                    &spatial.geometry,
                    input,
                )?;
                if let Some(t) = temporal {
                    let mid = spatial.geometry.output_extent(input)?;
                    total += conv_macs(batch, t.in_channels(), t.out_channels(), &t.geometry, mid)?;
                }
                Ok(total)
            }
        }
    }
}

/// Splits a full `(kt, kh, kw)` geometry into its spatial and temporal parts.
pub fn factorize_geometry(g: &ConvGeometry) -> (ConvGeometry, Option<ConvGeometry>) {
    let spatial = ConvGeometry::new(
        [1, g.kernel[1], g.kernel[2]],
        [1, g.stride[1], g.stride[2]],
        [0, g.padding[1], g.padding[2]],
    );
    if g.kernel[0] == 1 && g.stride[0] == 1 && g.padding[0] == 0 {
        return (spatial, None);
    }
    let temporal = ConvGeometry::new([g.kernel[0], 1, 1], [g.stride[0], 1, 1], [g.padding[0], 0, 0]);
    (spatial, Some(temporal))
}

pub fn conv_macs(
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    g: &ConvGeometry,
    input: [usize; 3],
) -> Result<u64> {
    let out = g.output_extent(input)?;
    let positions = (out[0] * out[1] * out[2]) as u64;
    Ok(batch as u64 * out_ch as u64 * positions * in_ch as u64 * g.kernel_volume() as u64)
}

pub fn transposed_conv_macs(
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    g: &ConvGeometry,
    input: [usize; 3],
) -> u64 {
    let positions = (input[0] * input[1] * input[2]) as u64;
    batch as u64 * in_ch as u64 * positions * out_ch as u64 * g.kernel_volume() as u64
}

fn is_identity_lowering(g: &ConvGeometry) -> bool {
    g.kernel == [1; 3] && g.stride == [1; 3] && g.padding == [0; 3]
}

/// Lowers one `[C, T, H, W]` volume into `[C·kt·kh·kw, To·Ho·Wo]`.
fn im2col<R: Real>(
    x: &[R],
    channels: usize,
    ext: [usize; 3],
    g: &ConvGeometry,
    out: [usize; 3],
    col: &mut [R],
) {
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let [ti_n, hi_n, wi_n] = ext;
    let [to_n, ho_n, wo_n] = out;
    let plane = to_n * ho_n * wo_n;
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * ti_n * hi_n * wi_n..(c + 1) * ti_n * hi_n * wi_n];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    let mut p = 0;
                    for to in 0..to_n {
                        let ti = (to * st + dt) as isize - pt as isize;
                        for ho in 0..ho_n {
                            let hi = (ho * sh + dh) as isize - ph as isize;
                            let row_ok = ti >= 0 && (ti as usize) < ti_n && hi >= 0 && (hi as usize) < hi_n;
                            if !row_ok {
                                dst[p..p + wo_n].iter_mut().for_each(|v| *v = R::zero());
                                p += wo_n;
                                continue;
                            }
                            let base = (ti as usize * hi_n + hi as usize) * wi_n;
                            for wo in 0..wo_n {
                                let wi = (wo * sw + dw) as isize - pw as isize;
                                dst[p] = if wi >= 0 && (wi as usize) < wi_n {
                                    xc[base + wi as usize]
                                } else {
                                    R::zero()
                                };
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into a zeroed volume.
fn col2im<R: Real>(
    col: &[R],
    channels: usize,
    ext: [usize; 3],
    g: &ConvGeometry,
    out: [usize; 3],
    x: &mut [R],
) {
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let [ti_n, hi_n, wi_n] = ext;
    let [to_n, ho_n, wo_n] = out;
    let plane = to_n * ho_n * wo_n;
    let mut row = 0;
    for c in 0..channels {
        let xc = &mut x[c * ti_n * hi_n * wi_n..(c + 1) * ti_n * hi_n * wi_n];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &col[row * plane..(row + 1) * plane];
                    let mut p = 0;
                    for to in 0..to_n {
                        let ti = (to * st + dt) as isize - pt as isize;
                        for ho in 0..ho_n {
                            let hi = (ho * sh + dh) as isize - ph as isize;
                            if ti < 0 || ti as usize >= ti_n || hi < 0 || hi as usize >= hi_n {
                                p += wo_n;
                                continue;
                            }
                            let base = (ti as usize * hi_n + hi as usize) * wi_n;
                            for wo in 0..wo_n {
                                let wi = (wo * sw + dw) as isize - pw as isize;
                                if wi >= 0 && (wi as usize) < wi_n {
                                    xc[base + wi as usize] += src[p];
                                }
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn check_weight<R: Real>(
    op: &'static str,
    weight: &Tensor<R>,
    g: &ConvGeometry,
) -> Result<[usize; 2]> {
    g.validate()?;
    match weight.shape() {
        &[a, b, kt, kh, kw] if [kt, kh, kw] == g.kernel => Ok([a, b]),
        other => Err(Error::shape(
            op,
            format!("weight shape {other:?} inconsistent with kernel {:?}", g.kernel),
        )),
    }
}

fn check_bias<R: Real>(op: &'static str, bias: Option<&Tensor<R>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(Error::shape(
            op,
            format!("bias shape {:?} for {channels} output channels", b.shape()),
        )),
        _ => Ok(()),
    }
}

/// Cross-correlation with zero padding: `y[o,t,h,w] = Σ W[o,i,dt,dh,dw]·x[i, t·s+dt−p, …] + b[o]`.
pub fn conv3d_forward<R: Real>(
    input: &Tensor<R>,
    weight: &Tensor<R>,
    bias: Option<&Tensor<R>>,
    g: &ConvGeometry,
) -> Result<Tensor<R>> {
    let [n, c, t, h, w] = input.dims5("conv3d")?;
    let [co, ci] = check_weight("conv3d", weight, g)?;
    if ci != c {
        return Err(Error::shape(
            "conv3d",
            format!("input has {c} channels, weight expects {ci}"),
        ));
    }
    check_bias("conv3d", bias, co)?;
    let out = g.output_extent([t, h, w])?;
    let plane = out[0] * out[1] * out[2];
    let in_vol = c * t * h * w;
    let k = c * g.kernel_volume();
    let mut y = Tensor::zeros(&[n, co, out[0], out[1], out[2]]);
    let x = input.data();
    let wd = weight.data();
    y.data_mut()
        .par_chunks_mut(co * plane)
        .enumerate()
        .for_each(|(b, yb)| {
            let xb = &x[b * in_vol..(b + 1) * in_vol];
            let owned;
            let col: &[R] = if is_identity_lowering(g) {
                xb
            } else {
                let mut buf = vec![R::zero(); k * plane];
                im2col(xb, c, [t, h, w], g, out, &mut buf);
                owned = buf;
                &owned
            };
            R::gemm(co, k, plane, R::one(), wd, (k as isize, 1), col, (plane as isize, 1), R::zero(), yb, (plane as isize, 1));
            if let Some(bias) = bias {
                for (o, chunk) in yb.chunks_mut(plane).enumerate() {
                    let bo = bias.data()[o];
                    chunk.iter_mut().for_each(|v| *v += bo);
                }
            }
        });
    Ok(y)
}

/// Gradients of [`conv3d_forward`] with respect to input, weight and bias.
pub struct ConvGrads<R: Real> {
    pub input: Option<Tensor<R>>,
    pub weight: Tensor<R>,
    pub bias: Tensor<R>,
}

pub fn conv3d_backward<R: Real>(
    input: &Tensor<R>,
    weight: &Tensor<R>,
    g: &ConvGeometry,
    upstream: &Tensor<R>,
    need_input_grad: bool,
) -> Result<ConvGrads<R>> {
    let [n, c, t, h, w] = input.dims5("conv3d_backward")?;
    let [co, ci] = check_weight("conv3d_backward", weight, g)?;
    if ci != c {
        return Err(Error::shape("conv3d_backward", format!("input has {c} channels, weight expects {ci}")));
    }
    let out = g.output_extent([t, h, w])?;
    if upstream.shape() != [n, co, out[0], out[1], out[2]] {
        return Err(Error::shape(
            "conv3d_backward",
            format!(
                "upstream {:?} does not match forward output {:?}",
                upstream.shape(),
                [n, co, out[0], out[1], out[2]]
            ),
        ));
    }
    let plane = out[0] * out[1] * out[2];
    let in_vol = c * t * h * w;
    let k = c * g.kernel_volume();
    let x = input.data();
    let wd = weight.data();
    let dy = upstream.data();

    let per_item: Vec<(Vec<R>, Option<Vec<R>>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let xb = &x[b * in_vol..(b + 1) * in_vol];
            let dyb = &dy[b * co * plane..(b + 1) * co * plane];
            let identity = is_identity_lowering(g);
            let owned;
            let col: &[R] = if identity {
                xb
            } else {
                let mut buf = vec![R::zero(); k * plane];
                im2col(xb, c, [t, h, w], g, out, &mut buf);
                owned = buf;
                &owned
            };
            let mut dw = vec![R::zero(); co * k];
            // dW[o, r] = Σ_p dY[o, p] · col[r, p]
            R::gemm(co, plane, k, R::one(), dyb, (plane as isize, 1), col, (1, plane as isize), R::zero(), &mut dw, (k as isize, 1));
            let dx = need_input_grad.then(|| {
                let mut dcol = vec![R::zero(); k * plane];
                // dcol[r, p] = Σ_o W[o, r] · dY[o, p]
                R::gemm(k, co, plane, R::one(), wd, (1, k as isize), dyb, (plane as isize, 1), R::zero(), &mut dcol, (plane as isize, 1));
                if identity {
                    dcol
                } else {
                    let mut dxb = vec![R::zero(); in_vol];
                    col2im(&dcol, c, [t, h, w], g, out, &mut dxb);
                    dxb
                }
            });
            (dw, dx)
        })
        .collect();

    let mut dweight = vec![R::zero(); co * k];
    let mut dbias = vec![R::zero(); co];
    let mut dinput = need_input_grad.then(|| Vec::with_capacity(n * in_vol));
    for (b, (dw, dx)) in per_item.into_iter().enumerate() {
        dweight.iter_mut().zip(&dw).for_each(|(a, &v)| *a += v);
        let dyb = &dy[b * co * plane..(b + 1) * co * plane];
        for (o, chunk) in dyb.chunks(plane).enumerate() {
            dbias[o] += chunk.iter().copied().sum::<R>();
        }
        if let (Some(acc), Some(dx)) = (dinput.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
    }
    Ok(ConvGrads {
        input: dinput.map(|d| Tensor::from_vec(input.shape(), d)).transpose()?,
        weight: Tensor::from_vec(weight.shape(), dweight)?,
        bias: Tensor::from_vec(&[co], dbias)?,
    })
}

/// Transposed convolution (the adjoint of [`conv3d_forward`] in its input).
///
/// `weight` has shape `[in, out, kt, kh, kw]`, the same memory layout as the
/// forward convolution that maps `out` channels to `in` channels.
pub fn transposed_conv3d_forward<R: Real>(
    input: &Tensor<R>,
    weight: &Tensor<R>,
    bias: Option<&Tensor<R>>,
    g: &ConvGeometry,
) -> Result<Tensor<R>> {
    let [n, c, t, h, w] = input.dims5("transposed_conv3d")?;
    let [ci, co] = check_weight("transposed_conv3d", weight, g)?;
    if ci != c {
        return Err(Error::shape(
            "transposed_conv3d",
            format!("input has {c} channels, weight expects {ci}"),
        ));
    }
    check_bias("transposed_conv3d", bias, co)?;
    let out = g.transposed_output_extent([t, h, w])?;
    let plane_in = t * h * w;
    let out_vol = co * out[0] * out[1] * out[2];
    let kr = co * g.kernel_volume();
    let x = input.data();
    let wd = weight.data();
    let mut y = Tensor::zeros(&[n, co, out[0], out[1], out[2]]);
    y.data_mut()
        .par_chunks_mut(out_vol)
        .enumerate()
        .for_each(|(b, yb)| {
            let xb = &x[b * c * plane_in..(b + 1) * c * plane_in];
            // col[r, p] = Σ_i W[i, r] · x[i, p]
            let mut col = vec![R::zero(); kr * plane_in];
            R::gemm(kr, c, plane_in, R::one(), wd, (1, kr as isize), xb, (plane_in as isize, 1), R::zero(), &mut col, (plane_in as isize, 1));
            if is_identity_lowering(g) {
                yb.copy_from_slice(&col);
            } else {
                col2im(&col, co, out, g, [t, h, w], yb);
            }
            if let Some(bias) = bias {
                let oplane = out[0] * out[1] * out[2];
                for (o, chunk) in yb.chunks_mut(oplane).enumerate() {
                    let bo = bias.data()[o];
                    chunk.iter_mut().for_each(|v| *v += bo);
                }
            }
        });
    Ok(y)
}

pub fn transposed_conv3d_backward<R: Real>(
    input: &Tensor<R>,
    weight: &Tensor<R>,
    g: &ConvGeometry,
    upstream: &Tensor<R>,
    need_input_grad: bool,
) -> Result<ConvGrads<R>> {
    let [n, c, t, h, w] = input.dims5("transposed_conv3d_backward")?;
    let [ci, co] = check_weight("transposed_conv3d_backward", weight, g)?;
    if ci != c {
        return Err(Error::shape("transposed_conv3d_backward", format!("input has {c} channels, weight expects {ci}")));
    }
    let out = g.transposed_output_extent([t, h, w])?;
    if upstream.shape() != [n, co, out[0], out[1], out[2]] {
        return Err(Error::shape(
            "transposed_conv3d_backward",
            format!("upstream {:?} does not match forward output", upstream.shape()),
        ));
    }
    let plane_in = t * h * w;
    let oplane = out[0] * out[1] * out[2];
    let out_vol = co * oplane;
    let kr = co * g.kernel_volume();
    let x = input.data();
    let wd = weight.data();
    let dy = upstream.data();

    let per_item: Vec<(Vec<R>, Option<Vec<R>>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let xb = &x[b * c * plane_in..(b + 1) * c * plane_in];
            let dyb = &dy[b * out_vol..(b + 1) * out_vol];
            let owned;
            let dcol: &[R] = if is_identity_lowering(g) {
                dyb
            } else {
                let mut buf = vec![R::zero(); kr * plane_in];
                im2col(dyb, co, out, g, [t, h, w], &mut buf);
                owned = buf;
                &owned
            };
            let mut dw = vec![R::zero(); c * kr];
            // dW[i, r] = Σ_p x[i, p] · dcol[r, p]
            R::gemm(c, plane_in, kr, R::one(), xb, (plane_in as isize, 1), dcol, (1, plane_in as isize), R::zero(), &mut dw, (kr as isize, 1));
            let dx = need_input_grad.then(|| {
                let mut dxb = vec![R::zero(); c * plane_in];
                R::gemm(c, kr, plane_in, R::one(), wd, (kr as isize, 1), dcol, (plane_in as isize, 1), R::zero(), &mut dxb, (plane_in as isize, 1));
                dxb
            });
            (dw, dx)
        })
        .collect();

    let mut dweight = vec![R::zero(); c * kr];
    let mut dbias = vec![R::zero(); co];
    let mut dinput = need_input_grad.then(|| Vec::with_capacity(n * c * plane_in));
    for (b, (dw, dx)) in per_item.into_iter().enumerate() {
        dweight.iter_mut().zip(&dw).for_each(|(a, &v)| *a += v);
        let dyb = &dy[b * out_vol..(b + 1) * out_vol];
        for (o, chunk) in dyb.chunks(oplane).enumerate() {
            dbias[o] += chunk.iter().copied().sum::<R>();
        }
        if let (Some(acc), Some(dx)) = (dinput.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
    }
    Ok(ConvGrads {
        input: dinput.map(|d| Tensor::from_vec(input.shape(), d)).transpose()?,
        weight: Tensor::from_vec(weight.shape(), dweight)?,
        bias: Tensor::from_vec(&[co], dbias)?,
    })
}
