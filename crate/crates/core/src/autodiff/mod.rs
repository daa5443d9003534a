//! Reverse-mode differentiation over dense tensors.

mod graph;
pub mod gradcheck;
pub mod kernels;

pub use gradcheck::{grad_check, GradCheck, GradCheckReport, DEFAULT_EPS, DEFAULT_FLOOR};
pub use graph::{Graph, Var};
