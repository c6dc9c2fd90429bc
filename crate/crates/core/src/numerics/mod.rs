//! Dense linear algebra, SPD matrix functions and seeded randomness.

mod eig;
mod matrix;
mod rng;
mod spd;

pub use eig::{sym_eig, SymEig, MAX_SWEEPS, SYMMETRY_TOL};
pub use matrix::{dot, Matrix};
pub use rng::{prng, Prng};
pub use spd::{log_divided_difference, spd_log, spd_log_vjp, sym_exp, SpdMatrix, DEGENERATE_GAP};
