//! Reverse-mode automatic differentiation over dense `f64` tensors, sized
//! for small convolutional networks trained on a single core.
//!
//! Build a [`Graph`] per forward pass, bind parameters from a
//! [`ParamStore`], call [`Graph::backward`] on a scalar and feed the
//! gradients back to the store for an Adam step.

mod check;
mod error;
mod graph;
mod kernels;
mod params;
mod suite;
mod tensor;

pub use check::{grad_check, grad_check_sampled, GradCheck};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{AdamConfig, ParamStore, CHECKPOINT_MAGIC};
pub use suite::{contract, primitive_suite, PrimitiveCheck};
pub use tensor::Tensor;
