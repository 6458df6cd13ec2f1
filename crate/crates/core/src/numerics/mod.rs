//! Dense tensors, reverse-mode autodiff over the op set the models need, and
//! a finite-difference gradient oracle.

mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{uniform, xavier, Bound, ParamStore};
pub use tensor::{Scalar, Tensor};

/// Layer-norm epsilon used everywhere.
pub const LN_EPS: f64 = 1e-5;
