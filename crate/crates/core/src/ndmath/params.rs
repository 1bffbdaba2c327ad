use serde::{Deserialize, Serialize};

use super::{Graph, MathError, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Named parameter tensors stored contiguously in one flat vector.
///
/// The flat layout is what the optimizer, the checkpoint and the gradient
/// checker see; models address tensors by the index returned from [`ParamSet::push`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    values: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let offset = self.values.len();
        self.entries.push(ParamEntry { name: name.into(), shape: value.shape().to_vec(), offset });
        self.values.extend_from_slice(value.data());
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn set_values(&mut self, values: &[f64]) -> Result<(), MathError> {
        if values.len() != self.values.len() {
            return Err(MathError::Shape {
                op: "set_values",
                detail: format!("expected {} values, got {}", self.values.len(), values.len()),
            });
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, idx: usize) -> &[f64] {
        let e = &self.entries[idx];
        let n: usize = e.shape.iter().product();
        &self.values[e.offset..e.offset + n]
    }

    pub fn slice_mut(&mut self, idx: usize) -> &mut [f64] {
        let e = &self.entries[idx];
        let n: usize = e.shape.iter().product();
        &mut self.values[e.offset..e.offset + n]
    }

    pub fn tensor(&self, idx: usize) -> Tensor {
        let e = &self.entries[idx];
        Tensor::new(e.shape.clone(), self.slice(idx).to_vec()).expect("entry shape is consistent")
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Places every parameter tensor on the graph as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        (0..self.entries.len()).map(|i| graph.param(self.tensor(i))).collect()
    }

    /// Places every parameter tensor on the graph as a constant (no gradients).
    pub fn bind_frozen(&self, graph: &mut Graph) -> Vec<Var> {
        (0..self.entries.len()).map(|i| graph.constant(self.tensor(i))).collect()
    }

    /// Collects leaf gradients into one flat vector aligned with [`ParamSet::values`].
    /// Parameters the loss does not depend on get zeros.
    pub fn gather_grads(&self, graph: &Graph, vars: &[Var]) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for (e, &v) in self.entries.iter().zip(vars) {
            if let Some(g) = graph.grad(v) {
                out[e.offset..e.offset + g.len()].copy_from_slice(g.data());
            }
        }
        out
    }
}
