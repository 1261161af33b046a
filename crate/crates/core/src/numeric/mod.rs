//! Dense matrices, a seeded generator, and reverse-mode gradients.

mod gradcheck;
mod graph;
mod matrix;
mod params;
mod rng;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, ParamGradients, Var};
pub(crate) use matrix::{dot, dropout_mask, log_sum_exp};
pub use matrix::{mse, Matrix};
pub use params::{Param, ParamId, ParamStore};
pub use rng::Rng;
