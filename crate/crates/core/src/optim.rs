//! Named parameter storage and SGD with momentum and weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub velocity: Tensor,
}

/// Ordered set of named parameters, each paired with a gradient and a
/// momentum buffer of the same shape.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            value,
            grad,
            velocity,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn param(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn param_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Check that every parameter, gradient and velocity buffer agree in shape.
    pub fn validate(&self) -> Result<()> {
        for p in &self.params {
            if p.grad.shape() != p.value.shape() || p.velocity.shape() != p.value.shape() {
                return Err(Error::Internal(format!(
                    "buffers of {:?} disagree: value {:?}, grad {:?}, velocity {:?}",
                    p.name,
                    p.value.shape(),
                    p.grad.shape(),
                    p.velocity.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// Same optimizer with another learning rate.
    pub fn with_lr(self, lr: f64) -> Self {
        SgdConfig { lr, ..self }
    }
}

/// Linear decay from `base_lr` towards zero, one step per epoch:
/// epoch `e` of `total` trains at `base_lr * (1 - e / total)`.
pub fn linear_decay_lr(base_lr: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base_lr;
    }
    base_lr * (1.0 - epoch as f64 / total as f64)
}

/// `v <- momentum*v + grad + wd*param; param <- param - lr*v`, then zero grads.
///
/// A zero learning rate leaves parameter values untouched (velocity still
/// accumulates).
pub fn sgd_step(params: &mut ParamSet, cfg: &SgdConfig) -> Result<()> {
    for p in params.iter_mut() {
        if p.grad.shape() != p.value.shape() || p.velocity.shape() != p.value.shape() {
            return Err(Error::Internal(format!(
                "shape mismatch in parameter {:?}",
                p.name
            )));
        }
        let value = p.value.data_mut();
        let grad = p.grad.data_mut();
        let vel = p.velocity.data_mut();
        for ((w, g), v) in value.iter_mut().zip(grad.iter_mut()).zip(vel.iter_mut()) {
            *v = cfg.momentum * *v + *g + cfg.weight_decay * *w;
            if cfg.lr != 0.0 {
                *w -= cfg.lr * *v;
            }
            *g = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(value: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::from_vec(&[1], vec![value]).unwrap())
            .unwrap();
        ps
    }

    fn set_grad(ps: &mut ParamSet, g: f64) {
        ps.get_mut("w").unwrap().grad.data_mut()[0] = g;
    }

    fn value(ps: &ParamSet) -> f64 {
        ps.get("w").unwrap().value.data()[0]
    }

    #[test]
    fn plain_sgd() {
        let mut ps = scalar(1.0);
        set_grad(&mut ps, 2.0);
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_step(&mut ps, &cfg).unwrap();
        assert!((value(&ps) - 0.8).abs() < 1e-15);
        assert_eq!(ps.get("w").unwrap().grad.data()[0], 0.0);
    }

    #[test]
    fn zero_grad_fixed_point() {
        let mut ps = scalar(1.25);
        let cfg = SgdConfig {
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        sgd_step(&mut ps, &cfg).unwrap();
        assert_eq!(value(&ps), 1.25);
    }

    #[test]
    fn momentum_two_steps() {
        // v1 = g, v2 = 0.9 g + g = 1.9 g
        let (p0, g, lr) = (0.7, 0.3, 0.05);
        let mut ps = scalar(p0);
        let cfg = SgdConfig {
            lr,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        for _ in 0..2 {
            set_grad(&mut ps, g);
            sgd_step(&mut ps, &cfg).unwrap();
        }
        let expected = p0 - lr * g - lr * 1.9 * g;
        assert!((value(&ps) - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut ps = scalar(-3.5);
        set_grad(&mut ps, 11.0);
        sgd_step(
            &mut ps,
            &SgdConfig {
                lr: 0.0,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
        )
        .unwrap();
        assert_eq!(value(&ps), -3.5);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = scalar(0.0);
        assert!(ps.insert("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn linear_decay_schedule() {
        assert_eq!(linear_decay_lr(0.1, 0, 10), 0.1);
        assert!((linear_decay_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(linear_decay_lr(0.1, 9, 10) > 0.0);
    }
}
