//! Define-by-run reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles and
//! computes exact gradients in one reverse sweep. The engine is generic over
//! [`Real`] so the same model code runs in `f32` for training and in `f64`
//! for finite-difference verification.

mod adam;
mod error;
mod gemm;
mod gradcheck;
mod graph;
mod real;
mod tensor;

pub use adam::AdamState;
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, to_f64_params, GradCheck, GradCheckReport};
pub use graph::{Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
