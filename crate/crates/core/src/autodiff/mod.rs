//! Tape-based reverse-mode automatic differentiation over dense `f32`
//! tensors, with an Adam optimiser and a binary checkpoint format.
//!
//! Binary ops broadcast numpy-style with trailing dimensions aligned. In
//! debug builds every op output is checked for NaN and infinity.
//!
//! ```
//! use aquamvs::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let loss = x.square().unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().item().unwrap(), 6.0);
//! ```

mod checkpoint;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use tape::{concat, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Parameter {
    name: String,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named trainable tensors with their gradients and Adam moments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    params: Vec<Parameter>,
    step: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let z = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            grad: z.clone(),
            m: z.clone(),
            v: z,
            value,
        });
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub(crate) fn value_at(&self, idx: usize) -> &Tensor {
        &self.params[idx].value
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i].grad)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if value.shape() != self.params[i].value.shape() {
            return Err(Error::shape(format!("parameter {name} changes shape")));
        }
        self.params[i].value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Add the gradients computed on `tape` for every parameter bound to it.
    pub fn accumulate(&mut self, tape: &Tape) {
        for (node, idx) in tape.bindings() {
            if let Some(g) = tape.grad_by_id(node) {
                self.params[idx].grad.add_assign(&g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Euclidean norm of all gradients together.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|&g| (g as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// One bias-corrected Adam update; gradients are zeroed afterwards.
pub fn adam_step(params: &mut ParameterSet, cfg: &AdamConfig) {
    params.step += 1;
    let t = params.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for p in &mut params.params {
        let n = p.value.len();
        for i in 0..n {
            let g = p.grad.data()[i] as f64;
            let m = cfg.beta1 * p.m.data()[i] as f64 + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * p.v.data()[i] as f64 + (1.0 - cfg.beta2) * g * g;
            p.m.data_mut()[i] = m as f32;
            p.v.data_mut()[i] = v as f32;
            let update = cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
            p.value.data_mut()[i] -= update as f32;
        }
    }
    params.zero_grad();
}
