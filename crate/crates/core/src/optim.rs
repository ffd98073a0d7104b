//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// One Adam update of a single tensor. `t` is the 1-based step count.
pub fn adam_update<R: Real>(
    param: &mut [R],
    grad: &[R],
    m: &mut [R],
    v: &mut [R],
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.len() != grad.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(Error::shape("adam_update", "parameter, gradient and moment sizes differ"));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i].as_f64();
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient element {i} is {g}")));
        }
        let mi = cfg.beta1 * m[i].as_f64() + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i].as_f64() + (1.0 - cfg.beta2) * g * g;
        m[i] = R::lit(mi);
        v[i] = R::lit(vi);
        let step = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        param[i] = R::lit(param[i].as_f64() - step);
    }
    Ok(())
}

/// Optimizer state for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam<R: Real = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<R>>,
    v: Vec<Tensor<R>>,
}

impl<R: Real> Adam<R> {
    pub fn new(store: &ParamStore<R>, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let m: Vec<Tensor<R>> = store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Ok(Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<R>, grads: &[(ParamId, Tensor<R>)]) -> Result<()> {
        self.step += 1;
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let k = id.0;
            if store.get(*id).shape() != g.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("gradient {:?} for parameter {:?}", g.shape(), store.get(*id).shape()),
                ));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            adam_update(store.get_mut(*id).data_mut(), g.data(), m.data_mut(), v.data_mut(), self.step, &self.config)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let mut p = [1.0f64, -2.0, 0.5];
        let g = [0.3, -4.0, 1e-3];
        let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
        adam_update(&mut p, &g, &mut m, &mut v, 1, &cfg).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps)
        for (i, &q) in [1.0f64, -2.0, 0.5].iter().enumerate() {
            let expect = q - cfg.lr * g[i] / (g[i].abs() + cfg.eps);
            assert!((p[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let cfg = AdamConfig::default();
        let mut p = [0.0f32];
        let (mut m, mut v) = ([0.0f32], [0.0f32]);
        assert!(adam_update(&mut p, &[f32::NAN], &mut m, &mut v, 1, &cfg).is_err());
        assert!(AdamConfig { lr: 0.0, ..cfg }.validate().is_err());
    }
}
