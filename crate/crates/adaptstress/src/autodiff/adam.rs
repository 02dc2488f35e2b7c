//! Named parameter collection and the Adam optimizer.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::Error;
use crate::Result;

/// Ordered collection of named trainable tensors. Iteration order is the
/// registration order, which the checkpoint format and optimizer state both
/// follow.
#[derive(Clone, Default)]
pub struct ParameterSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    /// Registers a parameter under a unique name.
    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Tensor {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        assert!(tensor.requires_grad(), "parameter {name} must require grad");
        self.names.push(name);
        self.tensors.push(tensor.clone());
        tensor
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Subset view sharing the same tensor storage; stepping an optimizer
    /// over the subset leaves the excluded parameters frozen.
    pub fn filtered(&self, mut keep: impl FnMut(&str) -> bool) -> ParameterSet {
        let mut out = ParameterSet::new();
        for (name, tensor) in self.iter() {
            if keep(name) {
                out.register(name, tensor.clone());
            }
        }
        out
    }

    pub fn clear_grads(&self) {
        for t in &self.tensors {
            t.clear_grad();
        }
    }

    /// Copies data from another set with identical names and shapes.
    pub fn load_from(&self, other: &ParameterSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint(
                "parameter names do not match".into(),
            ));
        }
        for (mine, theirs) in self.tensors.iter().zip(other.tensors.iter()) {
            if mine.shape() != theirs.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch {:?} vs {:?}",
                    mine.shape(),
                    theirs.shape()
                )));
            }
            mine.set_data(theirs.to_vec());
        }
        Ok(())
    }
}

/// Bias-corrected Adam. Moments are stored per parameter name so optimizer
/// state survives checkpointing.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update over every parameter; gradients are consumed. Parameters
    /// the loss did not reach are treated as zero-gradient; calling with no
    /// gradients anywhere is a contract violation (step before backward).
    pub fn step(&mut self, params: &ParameterSet, lr: f64) -> Result<()> {
        if params.iter().all(|(_, t)| t.grad().is_none()) {
            return Err(Error::Contract(
                "optimizer step before any backward pass".into(),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, tensor) in params.iter() {
            let grad = tensor
                .grad()
                .unwrap_or_else(|| vec![0.0; tensor.len()]);
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let mut data = tensor.to_vec();
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            tensor.set_data(data);
            tensor.clear_grad();
        }
        Ok(())
    }

    pub fn moments(&self) -> &BTreeMap<String, (Vec<f64>, Vec<f64>)> {
        &self.moments
    }

    pub fn restore_state(
        &mut self,
        step_count: u64,
        moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    ) {
        self.step_count = step_count;
        self.moments = moments;
    }
}
