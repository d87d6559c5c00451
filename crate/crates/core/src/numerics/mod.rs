//! Dense linear algebra and numerical utilities, all in `f64`.

mod finite_diff;
mod linalg;
mod matrix;
mod rng;

pub use finite_diff::{finite_diff_gradient, relative_error, DEFAULT_STEP, GRADIENT_SCALE_FLOOR};
pub use linalg::{
    covariance, exact_inv_sqrt, newton_schulz_inv_sqrt, symmetric_eigen, NewtonSchulzTrace,
    SymmetricEigen, DEFAULT_NS_ITERATIONS, DEFAULT_RIDGE,
};
pub use matrix::{dot, norm, Matrix};
pub use rng::{RngState, SeededRng};
