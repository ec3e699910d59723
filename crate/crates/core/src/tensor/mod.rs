//! Reverse-mode automatic differentiation over dense arrays.

mod conv;
mod graph;
mod gradcheck;
mod real;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use graph::{numel, DropoutMode, Graph, Tensor, Var};
pub use real::Real;
