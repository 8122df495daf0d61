//! Trainable parameters and the Adam update.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// A named trainable tensor together with its Adam moments.
///
/// The gradient accumulator is the gradient buffer of `value`. Updates replace
/// `value` with a fresh leaf so tensors already captured by a recorded graph
/// are never mutated.
#[derive(Debug)]
pub struct Parameter<E: Element> {
    name: String,
    value: Tensor<E>,
    adam_m: Vec<E>,
    adam_v: Vec<E>,
    step_count: u64,
}

/// Deep copy: the clone gets its own value leaf and gradient buffer.
impl<E: Element> Clone for Parameter<E> {
    fn clone(&self) -> Self {
        let value = Tensor::leaf(self.value.shape(), self.value.to_vec())
            .expect("shape already validated");
        value.set_grad(self.value.grad());
        Parameter {
            name: self.name.clone(),
            value,
            adam_m: self.adam_m.clone(),
            adam_v: self.adam_v.clone(),
            step_count: self.step_count,
        }
    }
}

impl<E: Element> Parameter<E> {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<E>) -> Result<Self> {
        let value = Tensor::leaf(shape, data)?;
        let n = value.numel();
        Ok(Parameter {
            name: name.into(),
            value,
            adam_m: vec![E::zero(); n],
            adam_v: vec![E::zero(); n],
            step_count: 0,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The current value, for use in a forward pass.
    pub fn value(&self) -> &Tensor<E> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.value.grad()
    }

    pub fn zero_grad(&self) {
        self.value.zero_grad();
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn adam_m(&self) -> &[E] {
        &self.adam_m
    }

    pub fn adam_v(&self) -> &[E] {
        &self.adam_v
    }

    /// Replaces the values, keeping the gradient buffer and optimizer state.
    pub fn set_data(&mut self, data: Vec<E>) -> Result<()> {
        let grad = self.value.grad();
        let value = Tensor::leaf(self.value.shape(), data)?;
        value.set_grad(grad);
        self.value = value;
        Ok(())
    }

    /// Overwrites optimizer state, e.g. when restoring a checkpoint.
    pub fn set_state(&mut self, m: Vec<E>, v: Vec<E>, step_count: u64) -> Result<()> {
        if m.len() != self.numel() || v.len() != self.numel() {
            return Err(Error::Dimension(format!(
                "optimizer state for `{}` has {}/{} elements, parameter has {}",
                self.name,
                m.len(),
                v.len(),
                self.numel()
            )));
        }
        self.adam_m = m;
        self.adam_v = v;
        self.step_count = step_count;
        Ok(())
    }

    /// One bias-corrected Adam step. The gradient buffer is left intact.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(Error::Contract(format!(
                "Adam betas must lie in [0, 1), got ({}, {})",
                cfg.beta1, cfg.beta2
            )));
        }
        let grad = self.value.grad().ok_or_else(|| {
            Error::Contract(format!("parameter `{}` has no gradient", self.name))
        })?;
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (E::of(cfg.beta1), E::of(cfg.beta2));
        let c1 = E::one() - E::of(cfg.beta1.powi(t));
        let c2 = E::one() - E::of(cfg.beta2.powi(t));
        let (lr, eps) = (E::of(cfg.lr), E::of(cfg.eps));
        let mut data = self.value.to_vec();
        for i in 0..data.len() {
            let g = grad[i];
            self.adam_m[i] = b1 * self.adam_m[i] + (E::one() - b1) * g;
            self.adam_v[i] = b2 * self.adam_v[i] + (E::one() - b2) * g * g;
            let m_hat = self.adam_m[i] / c1;
            let v_hat = self.adam_v[i] / c2;
            data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        let value = Tensor::leaf(self.value.shape(), data)?;
        value.set_grad(Some(grad));
        self.value = value;
        Ok(())
    }
}
