//! Deterministic dense linear algebra on `f64`.

mod decomp;
mod matrix;
mod rng;

pub use decomp::{kaiming_bound, kaiming_uniform, orthonormal_basis, svd_thin, SvdResult, RANK_TOL};
pub use matrix::Matrix;
pub use rng::{Rng, RNG_ALGORITHM};
