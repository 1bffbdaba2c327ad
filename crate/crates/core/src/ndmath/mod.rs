//! Minimal dense tensors with reverse-mode automatic differentiation.

mod graph;
mod params;
mod tensor;

pub mod gradcheck;

use thiserror::Error;

pub use graph::{sigmoid, Graph, Var};
pub use params::{ParamEntry, ParamSet};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

#[cfg(test)]
mod tests;
