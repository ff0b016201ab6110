use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{bail, Error, Result};
use crate::nn::Classifier;
use crate::tensor::{Scalar, Tensor};

/// Cosine decay `base * cos(7πk / 16K)`: starts at `base` and ends at
/// `base * cos(7π/16) ≈ 0.195 * base`, so the rate never reaches zero.
pub fn cosine_lr(step: u64, total_steps: u64, base: f64) -> Result<f64> {
    if total_steps == 0 {
        bail!(Config, "total steps must be positive");
    }
    if step > total_steps {
        bail!(Config, "step {} beyond schedule of {} steps", step, total_steps);
    }
    Ok(base * libm::cos(7.0 * PI * step as f64 / (16.0 * total_steps as f64)))
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// velocity: `v ← βv + g + wd·θ`, `θ ← θ − η(k)·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T = f64> {
    base_lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Tensor<T>>,
    step: u64,
    total_steps: u64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(model: &Classifier<T>, base_lr: f64, momentum: f64, weight_decay: f64, total_steps: u64) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            bail!(Config, "learning rate must be positive, got {base_lr}");
        }
        if !(0.0..1.0).contains(&momentum) {
            bail!(Config, "momentum must be in [0, 1), got {momentum}");
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            bail!(Config, "weight decay must be nonnegative, got {weight_decay}");
        }
        if total_steps == 0 {
            bail!(Config, "total steps must be positive");
        }
        let velocity = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Ok(Self { base_lr, momentum, weight_decay, velocity, step: 0, total_steps })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn current_lr(&self) -> Result<f64> {
        cosine_lr(self.step, self.total_steps, self.base_lr)
    }

    /// Applies one update from the gradients currently held by `model` and
    /// returns the learning rate that was used.
    pub fn step(&mut self, model: &mut Classifier<T>) -> Result<f64> {
        if self.step >= self.total_steps {
            return Err(Error::ScheduleExhausted { step: self.step, total: self.total_steps });
        }
        if model.params().len() != self.velocity.len() {
            bail!(Dimension, "optimizer built for a different model");
        }
        let lr = self.current_lr()?;
        let (eta, beta, wd) = (T::cast(lr), T::cast(self.momentum), T::cast(self.weight_decay));
        for (p, v) in model.params_mut().iter_mut().zip(&mut self.velocity) {
            let (theta, grad) = (p.value.data_mut(), p.grad.data());
            for ((t, &g), vel) in theta.iter_mut().zip(grad).zip(v.data_mut()) {
                *vel = beta * *vel + g + wd * *t;
                *t = *t - eta * *vel;
            }
        }
        self.step += 1;
        Ok(lr)
    }
}
