//! Nearest-neighbour upsampling, temporal average pooling and cropping.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub fn upsample_nearest<R: Real>(input: &Tensor<R>, factors: [usize; 3]) -> Result<Tensor<R>> {
    let [n, c, t, h, w] = input.dims5("upsample_nearest")?;
    if factors.contains(&0) {
        return Err(Error::InvalidArgument(format!("upsample factors {factors:?} must be positive")));
    }
    let [ft, fh, fw] = factors;
    let (to, ho, wo) = (t * ft, h * fh, w * fw);
    let mut out = Tensor::zeros(&[n, c, to, ho, wo]);
    let x = input.data();
    let y = out.data_mut();
    for nc in 0..n * c {
        let src = &x[nc * t * h * w..(nc + 1) * t * h * w];
        let dst = &mut y[nc * to * ho * wo..(nc + 1) * to * ho * wo];
        for ot in 0..to {
            for oh in 0..ho {
                let srow = &src[((ot / ft) * h + oh / fh) * w..][..w];
                let drow = &mut dst[(ot * ho + oh) * wo..][..wo];
                for (ow, d) in drow.iter_mut().enumerate() {
                    *d = srow[ow / fw];
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_nearest`]: sums each replicated block.
pub fn upsample_nearest_backward<R: Real>(
    input_shape: &[usize],
    factors: [usize; 3],
    upstream: &Tensor<R>,
) -> Result<Tensor<R>> {
    let &[n, c, t, h, w] = input_shape else {
        return Err(Error::shape("upsample_nearest_backward", "expected rank-5 input shape"));
    };
    let [ft, fh, fw] = factors;
    let (to, ho, wo) = (t * ft, h * fh, w * fw);
    if upstream.shape() != [n, c, to, ho, wo] {
        return Err(Error::shape("upsample_nearest_backward", "upstream shape mismatch"));
    }
    let mut dx = Tensor::zeros(input_shape);
    let g = upstream.data();
    let d = dx.data_mut();
    for nc in 0..n * c {
        let src = &g[nc * to * ho * wo..(nc + 1) * to * ho * wo];
        let dst = &mut d[nc * t * h * w..(nc + 1) * t * h * w];
        for ot in 0..to {
            for oh in 0..ho {
                let base = ((ot / ft) * h + oh / fh) * w;
                for ow in 0..wo {
                    dst[base + ow / fw] += src[(ot * ho + oh) * wo + ow];
                }
            }
        }
    }
    Ok(dx)
}

/// Global average over the temporal axis: `[N,C,T,H,W] -> [N,C,1,H,W]`.
pub fn temporal_mean<R: Real>(input: &Tensor<R>) -> Result<Tensor<R>> {
    let [n, c, t, h, w] = input.dims5("temporal_mean")?;
    let plane = h * w;
    let inv = R::lit(1.0 / t as f64);
    let mut out = Tensor::zeros(&[n, c, 1, h, w]);
    let x = input.data();
    for (nc, dst) in out.data_mut().chunks_mut(plane).enumerate() {
        for ti in 0..t {
            let src = &x[(nc * t + ti) * plane..][..plane];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
        }
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    Ok(out)
}

pub fn temporal_mean_backward<R: Real>(input_shape: &[usize], upstream: &Tensor<R>) -> Result<Tensor<R>> {
    let &[n, c, t, h, w] = input_shape else {
        return Err(Error::shape("temporal_mean_backward", "expected rank-5 input shape"));
    };
    if upstream.shape() != [n, c, 1, h, w] {
        return Err(Error::shape("temporal_mean_backward", "upstream shape mismatch"));
    }
    let plane = h * w;
    let inv = R::lit(1.0 / t as f64);
    let mut dx = Tensor::zeros(input_shape);
    let g = upstream.data();
    for (i, dst) in dx.data_mut().chunks_mut(plane).enumerate() {
        let src = &g[(i / t) * plane..][..plane];
        dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s * inv);
    }
    Ok(dx)
}

/// Spatial crop keeping rows `rows.0..rows.1` and columns `cols.0..cols.1`.
pub fn crop_spatial<R: Real>(
    input: &Tensor<R>,
    rows: (usize, usize),
    cols: (usize, usize),
) -> Result<Tensor<R>> {
    let [n, c, t, h, w] = input.dims5("crop")?;
    if rows.0 >= rows.1 || cols.0 >= cols.1 || rows.1 > h || cols.1 > w {
        return Err(Error::InvalidArgument(format!(
            "crop rows {rows:?} cols {cols:?} invalid for {h}x{w} frames"
        )));
    }
    let (ho, wo) = (rows.1 - rows.0, cols.1 - cols.0);
    let mut out = Tensor::zeros(&[n, c, t, ho, wo]);
    let x = input.data();
    for (plane_idx, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
        let src = &x[plane_idx * h * w..(plane_idx + 1) * h * w];
        for r in 0..ho {
            dst[r * wo..(r + 1) * wo].copy_from_slice(&src[(rows.0 + r) * w + cols.0..][..wo]);
        }
    }
    Ok(out)
}
