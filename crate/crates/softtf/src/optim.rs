//! Adam optimizer over named parameter collections.
//!
//! Training code keeps its trainable tensors in a [`ParamSet`]; the order of
//! insertion is stable, so optimizer state, tape registration, and gradient
//! extraction all agree on slot indices without any hashing.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    /// Appends a parameter and returns its slot index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn tensor(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    /// Looks a parameter up by name.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    /// Total number of scalars across all parameters.
    pub fn scalar_count(&self) -> u64 {
        self.tensors.iter().map(|t| t.numel() as u64).sum()
    }

    /// Registers every parameter on a tape as a gradient leaf, in slot order.
    pub fn register(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> AdamConfig {
        AdamConfig { lr, ..AdamConfig::default() }
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Fresh optimizer state sized to match `params` slot for slot.
    pub fn for_params(cfg: AdamConfig, params: &ParamSet) -> AdamState {
        let m = (0..params.len()).map(|i| vec![0.0; params.tensor(i).numel()]).collect();
        let v = (0..params.len()).map(|i| vec![0.0; params.tensor(i).numel()]).collect();
        AdamState { cfg, step_count: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }

    /// One update over all slots. `grads[i]` is the gradient buffer for slot
    /// `i`; `None` means no gradient reached that parameter this step, which
    /// still decays its momentum (a zero gradient).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::contract(format!(
                "adam step: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for slot in 0..params.len() {
            let theta = params.tensor_mut(slot);
            let zero;
            let g: &[f64] = match &grads[slot] {
                Some(t) => {
                    if t.numel() != theta.numel() {
                        return Err(Error::ShapeMismatch {
                            op: "adam step",
                            expected: theta.shape.clone(),
                            got: t.shape.clone(),
                        });
                    }
                    &t.data
                }
                None => {
                    zero = vec![0.0; theta.numel()];
                    &zero
                }
            };
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for j in 0..theta.numel() {
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g[j];
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                theta.data[j] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
