//! Top-down feature pyramid fusion: `P_top = L(F_top)`, `P_i = L(F_i) + up2(P_{i+1})`.

use crate::error::{Error, Result};
use crate::ops::conv::Conv3d;
use crate::ops::resample::upsample_nearest;
use crate::real::Real;
use crate::tensor::Tensor;

/// Default common channel width of the fused maps.
pub const FPN_CHANNELS: usize = 64;

/// Feature maps ordered fine to coarse, one lateral conv per level, and the fused outputs.
#[derive(Clone, Debug)]
pub struct PyramidLevels<R: Real = f32> {
    pub features: Vec<Tensor<R>>,
    pub laterals: Vec<Conv3d<R>>,
    pub outputs: Vec<Tensor<R>>,
}

impl<R: Real> PyramidLevels<R> {
    pub fn new(features: Vec<Tensor<R>>, laterals: Vec<Conv3d<R>>) -> Result<Self> {
        if features.is_empty() || features.len() != laterals.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature maps with {} lateral convolutions",
                features.len(),
                laterals.len()
            )));
        }
        let shapes: Vec<[usize; 5]> = features
            .iter()
            .map(|f| f.dims5("fpn_fuse"))
            .collect::<Result<_>>()?;
        check_halving(&shapes)?;
        let width = laterals[0].out_channels();
        for (i, (lat, s)) in laterals.iter().zip(&shapes).enumerate() {
            if lat.out_channels() != width {
                return Err(Error::shape(
                    "fpn_fuse",
                    format!("lateral {i} emits {} channels, level 0 emits {width}", lat.out_channels()),
                ));
            }
            if lat.in_channels() != s[1] {
                return Err(Error::shape(
                    "fpn_fuse",
                    format!("lateral {i} expects {} channels, feature has {}", lat.in_channels(), s[1]),
                ));
            }
        }
        Ok(Self {
            features,
            laterals,
            outputs: Vec::new(),
        })
    }
}

/// Each level must have exactly half the height and width of the previous one.
pub fn check_halving(shapes: &[[usize; 5]]) -> Result<()> {
    for (i, pair) in shapes.windows(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        if a[0] != b[0] || a[2] != b[2] || a[3] != 2 * b[3] || a[4] != 2 * b[4] {
            return Err(Error::shape(
                "fpn_fuse",
                format!(
                    "level {} is {}x{} but level {} is {}x{}; expected exact halving",
                    i,
                    a[3],
                    a[4],
                    i + 1,
                    b[3],
                    b[4]
                ),
            ));
        }
    }
    Ok(())
}

pub fn fpn_fuse<R: Real>(mut levels: PyramidLevels<R>) -> Result<PyramidLevels<R>> {
    let n = levels.features.len();
    let mut outputs: Vec<Tensor<R>> = Vec::with_capacity(n);
    let mut above: Option<Tensor<R>> = None;
    for i in (0..n).rev() {
        let mut p = levels.laterals[i].forward(&levels.features[i])?;
        if let Some(top) = above {
            let up = upsample_nearest(&top, [1, 2, 2])?;
            p = p.add(&up)?;
        }
        outputs.push(p.clone());
        above = Some(p);
    }
    outputs.reverse();
    levels.outputs = outputs;
    Ok(levels)
}
