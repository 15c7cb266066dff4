//! Adam with bias correction.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::real::{c, Real};
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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers and update count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        let z: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: z.clone(),
            v: z,
        }
    }

    /// Whether every buffer shape-matches its parameter.
    pub fn fits(&self, params: &ParamStore<T>) -> bool {
        let ok = |b: &[Tensor<T>]| {
            b.len() == params.len() && b.iter().zip(params.tensors()).all(|(x, p)| x.shape() == p.shape())
        };
        ok(&self.m) && ok(&self.v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: OptimState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        Self {
            config,
            state: OptimState::zeros_like(params),
        }
    }

    /// One update. A non-finite gradient aborts the step before anything changes.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || !self.state.fits(params) {
            return Err(Error::InvalidConfig(format!(
                "{} gradients / optimizer state for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, (g, p)) in grads.iter().zip(params.tensors()).enumerate() {
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    detail: format!("{}: grad {:?} for {:?}", params.names()[i], g.shape(), p.shape()),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(params.names()[i].clone()));
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let cfg = self.config;
        let bc1 = c::<T>(1.0 - Float::powi(cfg.beta1, t));
        let bc2 = c::<T>(1.0 - Float::powi(cfg.beta2, t));
        let (b1, b2) = (c::<T>(cfg.beta1), c::<T>(cfg.beta2));
        let (lr, eps) = (c::<T>(cfg.lr), c::<T>(cfg.eps));
        let one = T::one();
        for (k, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (self.state.m[k].data_mut(), self.state.v[k].data_mut(), grads[k].data());
            for (i, pv) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *pv -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::String;
    use alloc::vec;

    fn store(v: f64) -> ParamStore<f64> {
        ParamStore::from_parts(vec![String::from("w")], vec![Tensor::scalar(v)])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(0.7);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.tensors()[0].item(), 0.7);
        assert_eq!(opt.state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(0.0);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        assert!((p.tensors()[0].item() + 1e-4).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = store(0.5);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let err = opt.step(&mut p, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert_eq!(err, Error::NonFiniteGradient("w".into()));
        assert_eq!(p.tensors()[0].item(), 0.5);
        assert_eq!(opt.state.step, 0);
    }
}
