//! Dense matrix kernel with reverse-mode gradients.

mod gradcheck;
mod graph;
mod matrix;
mod params;

pub use gradcheck::{compare_gradients, grad_check, relative_error, GradCheckReport, WorstCoordinate, RELATIVE_ERROR_FLOOR};
pub use graph::{Graph, Var, SHARE_ZERO_THRESHOLD};
pub(crate) use graph::share_or_half;
pub use matrix::{cross_entropy, linear, matmul, matmul_nt, matmul_tn, softmax_rows, Matrix};
pub use params::{Gradients, ParamId, ParamStore};
