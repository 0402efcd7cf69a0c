//! Dense linear algebra primitives.

mod eigen;
mod matrix;

pub use eigen::{
    dominant_eig, eig_all, spectral_radius, Complex, MAX_EIG_DIM, POWER_MAX_ITER, POWER_TOL,
    QR_DEFLATION_TOL,
};
pub use matrix::{Cholesky, Lu, Matrix};
