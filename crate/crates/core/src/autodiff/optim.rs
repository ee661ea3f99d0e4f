//! Named parameter sets and the SGD/Adam update step.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Ordered collection of named trainable tensors. Gradients accumulate into
/// each tensor's own grad buffer; the optimizer consumes and clears them.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor as trainable and returns its index.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name);
        self.values.push(tensor.with_grad());
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.values[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.values {
            t.zero_grad();
        }
    }

    /// L2 norm of the concatenated gradient.
    pub fn grad_norm(&self) -> f32 {
        let mut acc = 0.0f64;
        for t in &self.values {
            if let Some(g) = t.grad() {
                for &v in g {
                    acc += (v as f64) * (v as f64);
                }
            }
        }
        (acc as f32).sqrt()
    }

    pub fn grads_finite(&self) -> bool {
        self.values
            .iter()
            .all(|t| t.grad().map_or(true, |g| g.iter().all(|v| v.is_finite())))
    }

    /// Replaces values with another set's (shapes must match). Grad buffers
    /// are reset.
    pub fn load_values_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::State("parameter sets have different layouts".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::State(format!(
                    "parameter shape mismatch: {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
            dst.zero_grad();
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new(), step: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(Adam),
    Sgd(Sgd),
}

impl Optimizer {
    pub fn adam(lr: f32) -> Self {
        Optimizer::Adam(Adam::new(lr))
    }

    pub fn sgd(lr: f32) -> Self {
        Optimizer::Sgd(Sgd { lr })
    }

    pub fn lr(&self) -> f32 {
        match self {
            Optimizer::Adam(a) => a.lr,
            Optimizer::Sgd(s) => s.lr,
        }
    }

    pub fn set_lr(&mut self, lr: f32) {
        match self {
            Optimizer::Adam(a) => a.lr = lr,
            Optimizer::Sgd(s) => s.lr = lr,
        }
    }

    /// Applies one update from the gradients stored in `params`, then clears
    /// them. Identical inputs produce identical updates.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if self.lr() <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr())));
        }
        if !params.grads_finite() {
            return Err(Error::Numeric("non-finite gradient, step aborted".into()));
        }
        match self {
            Optimizer::Sgd(sgd) => {
                for i in 0..params.len() {
                    let lr = sgd.lr;
                    let t = params.value_mut(i);
                    if !t.requires_grad() {
                        continue;
                    }
                    let Some(g) = t.grad() else { continue };
                    let g = g.to_vec();
                    for (p, gi) in t.data_mut().iter_mut().zip(&g) {
                        *p -= lr * gi;
                    }
                    t.zero_grad();
                }
            }
            Optimizer::Adam(adam) => {
                if adam.m.is_empty() {
                    adam.m = (0..params.len()).map(|i| vec![0.0; params.value(i).numel()]).collect();
                    adam.v = adam.m.clone();
                }
                assert_eq!(adam.m.len(), params.len(), "optimizer bound to a different set");
                adam.step += 1;
                let bc1 = 1.0 - adam.beta1.powi(adam.step as i32);
                let bc2 = 1.0 - adam.beta2.powi(adam.step as i32);
                for i in 0..params.len() {
                    let (lr, b1, b2, eps) = (adam.lr, adam.beta1, adam.beta2, adam.eps);
                    let m = &mut adam.m[i];
                    let v = &mut adam.v[i];
                    let t = params.value_mut(i);
                    if !t.requires_grad() {
                        continue;
                    }
                    let Some(g) = t.grad() else { continue };
                    let g = g.to_vec();
                    for (j, p) in t.data_mut().iter_mut().enumerate() {
                        let gj = g[j];
                        m[j] = b1 * m[j] + (1.0 - b1) * gj;
                        v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                    t.zero_grad();
                }
            }
        }
        Ok(())
    }
}
