//! Minimal dense-tensor math with reverse-mode automatic differentiation and
//! a finite-difference gradient checker.

mod check;
mod graph;
mod tensor;

pub use check::{finite_difference_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::Graph;
pub use tensor::{Tensor, TensorError};
