//! Minimal dense numeric kernel: matrices, a 3-layer MLP with explicit
//! reverse-mode gradients, and a finite-difference gradient checker.

mod gradcheck;
mod matrix;
mod mlp;

pub use gradcheck::grad_check;
pub use matrix::{dot, l2_normalize_rows, l2_normalize_rows_backward, Matrix};
pub use mlp::{
    mlp_backward, mlp_forward, ForwardCache, GradBundle, MlpLayer, MlpParams, MLP_LAYERS,
};
