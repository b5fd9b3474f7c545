//! Dense numeric kernels, the reverse-mode graph, and gradient verification.

pub mod gradcheck;
pub mod kernels;
mod matrix;
pub mod tape;

pub use gradcheck::{central_diff_check, GradReport};
pub use kernels::{col_softmax, kl_divergence, l2_normalize_rows, row_softmax};
pub use matrix::{dot, Matrix};
pub use tape::{Graph, Gradients, Var};
