//! Named parameter storage, Adam optimization, and initialization.
//!
//! Parameters live in a [`BTreeMap`] so every iteration over them (updates,
//! checkpoint serialization, digesting) happens in one canonical order.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::BnUpdate;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// One trainable tensor with its Adam moment estimates.
#[derive(Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Element> Param<T> {
    fn new(value: Tensor<T>) -> Self {
        let n = value.numel();
        Param {
            value,
            m: vec![T::ZERO; n],
            v: vec![T::ZERO; n],
        }
    }

    /// First and second Adam moments, exposed for checkpointing.
    pub fn moments(&self) -> (&[T], &[T]) {
        (&self.m, &self.v)
    }

    /// Restores Adam moments (e.g. from a checkpoint).
    pub fn set_moments(&mut self, m: Vec<T>, v: Vec<T>) -> Result<()> {
        if m.len() != self.value.numel() || v.len() != self.value.numel() {
            return Err(Error::Shape(format!(
                "moment buffers must match parameter size {}",
                self.value.numel()
            )));
        }
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// Running statistics of one batch-norm layer. Not trained by the
/// optimizer, but part of the model state for checkpointing.
#[derive(Clone)]
pub struct BnState<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> BnState<T> {
    /// Fresh statistics: zero mean, unit variance.
    pub fn identity(channels: usize) -> Self {
        BnState {
            mean: vec![T::ZERO; channels],
            var: vec![T::ONE; channels],
        }
    }
}

/// Adam hyperparameters. `weight_decay` is classic additive L2: the decay
/// term is added to the raw gradient before the moment updates.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// All state of a model: trainable parameters, their optimizer moments, the
/// shared Adam step counter, and batch-norm running statistics.
#[derive(Clone)]
pub struct ParameterSet<T> {
    params: BTreeMap<String, Param<T>>,
    bn: BTreeMap<String, BnState<T>>,
    step: u64,
}

impl<T: Element> Default for ParameterSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            params: BTreeMap::new(),
            bn: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter '{name}'")));
        }
        self.params.insert(name.to_string(), Param::new(value));
        Ok(())
    }

    pub fn insert_bn(&mut self, name: &str, channels: usize) -> Result<()> {
        if self.bn.contains_key(name) {
            return Err(Error::Contract(format!("duplicate batch-norm state '{name}'")));
        }
        self.bn.insert(name.to_string(), BnState::identity(channels));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn bn_state(&self, name: &str) -> Result<&BnState<T>> {
        self.bn
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown batch-norm state '{name}'")))
    }

    pub fn bn_state_mut(&mut self, name: &str) -> Result<&mut BnState<T>> {
        self.bn
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown batch-norm state '{name}'")))
    }

    /// Parameters in canonical (lexicographic) order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Batch-norm states in canonical order.
    pub fn iter_bn(&self) -> impl Iterator<Item = (&str, &BnState<T>)> {
        self.bn.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Adam step counter (number of optimizer steps taken so far).
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Restores the step counter (e.g. from a checkpoint).
    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// Applies staged batch-norm running-statistic updates.
    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate<T>>) -> Result<()> {
        for up in updates {
            let state = self.bn_state_mut(&up.name)?;
            if state.mean.len() != up.mean.len() || state.var.len() != up.var.len() {
                return Err(Error::Shape(format!(
                    "batch-norm update for '{}' has wrong channel count",
                    up.name
                )));
            }
            state.mean = up.mean;
            state.var = up.var;
        }
        Ok(())
    }

    /// One Adam update over the provided gradients.
    ///
    /// Every parameter present in `grads` is updated; parameters without a
    /// gradient are left untouched. The update for each element is
    ///
    /// ```text
    /// g   = grad + weight_decay * p        (additive L2 penalty)
    /// m   = beta1 * m + (1 - beta1) * g
    /// v   = beta2 * v + (1 - beta2) * g^2
    /// p  -= lr * (m / (1 - beta1^t)) / (sqrt(v / (1 - beta2^t)) + eps)
    /// ```
    ///
    /// with the bias-correction step count `t` shared across all parameters
    /// and incremented once per call.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Vec<T>>, cfg: &AdamConfig) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::from_f64(1.0 / (1.0 - cfg.beta1.powi(t)));
        let bc2 = T::from_f64(1.0 / (1.0 - cfg.beta2.powi(t)));
        let beta1 = T::from_f64(cfg.beta1);
        let beta2 = T::from_f64(cfg.beta2);
        let one_m_beta1 = T::from_f64(1.0 - cfg.beta1);
        let one_m_beta2 = T::from_f64(1.0 - cfg.beta2);
        let lr = T::from_f64(cfg.lr);
        let eps = T::from_f64(cfg.eps);
        let wd = T::from_f64(cfg.weight_decay);

        for (name, grad) in grads {
            let param = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter '{name}'")))?;
            if grad.len() != param.value.numel() {
                return Err(Error::Shape(format!(
                    "gradient for '{name}' has {} elements, parameter has {}",
                    grad.len(),
                    param.value.numel()
                )));
            }
            let values = param.value.data_mut();
            for i in 0..grad.len() {
                let g = grad[i] + wd * values[i];
                param.m[i] = beta1 * param.m[i] + one_m_beta1 * g;
                param.v[i] = beta2 * param.v[i] + one_m_beta2 * g * g;
                let m_hat = param.m[i] * bc1;
                let v_hat = param.v[i] * bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Variance of the He-normal initializer for a given fan-in: `2 / fan_in`.
pub fn he_variance(fan_in: usize) -> f64 {
    2.0 / fan_in as f64
}

/// Samples a tensor from the He-normal distribution `N(0, 2 / fan_in)`.
///
/// Draws are made in `f64` and narrowed, so `f32` and `f64` instantiations
/// see the same underlying sample sequence.
pub fn he_init<T: Element, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::Contract("he_init requires positive fan-in".into()));
    }
    let sigma = he_variance(fan_in).sqrt();
    let normal = Normal::new(0.0f64, sigma)
        .map_err(|e| Error::Contract(format!("invalid normal distribution: {e}")))?;
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| T::from_f64(normal.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data)
}
