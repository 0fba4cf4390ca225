//! Numerical primitives: dense matrices, the symmetric eigensolver, Adam,
//! and the evaluation statistics.

mod adam;
mod eigen;
mod matrix;
pub mod stats;

pub use adam::{adam_step, AdamState, DEFAULT_LEARNING_RATE};
pub use eigen::{normalize_sign, sym_eig, sym_inv_sqrt, sym_inverse, EigenDecomposition};
pub use matrix::{dot, norm, Matrix};
pub use stats::{mann_whitney_u, pearson, sample_std_dev, std_dev, wasserstein_1d, MannWhitney};
