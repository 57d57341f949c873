//! Minimal dense tensors with reverse-mode automatic differentiation, the
//! AdamW optimiser and finite-difference gradient checks.

mod error;
mod gradcheck;
mod graph;
mod optim;
mod params;
pub mod rng;
mod scalar;
pub mod suite;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_many, grad_check_params, relative_error, FD_STEP};
pub use graph::{Grads, Graph, Var};
pub use optim::{adamw_step, lr_at_step, AdamWConfig, OptimizerState};
pub use params::{GradBuffer, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
