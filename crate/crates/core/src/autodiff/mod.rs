//! Reverse-mode differentiation over 2-D `f64` arrays.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and a
//! backward closure over cloned operands. Nodes created only from constants
//! skip the closure. Backward walks the tape in reverse creation order, so
//! accumulation order, and therefore every bit of the result, is fixed.

pub mod gradcheck;
mod graph;
pub mod nn;
pub mod optim;
mod params;

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use graph::{gelu, gelu_grad, BackFn, Gradients, Graph, Var, NORM_EPS};
pub use params::{Binder, Leaf, ParamSet};
