//! Symmetric positive-definite matrices and the matrix logarithm.

use crate::error::{Error, Result};

use super::eig::{sym_eig, SYMMETRY_TOL};
use super::Matrix;

/// Relative gap below which two eigenvalues are treated as equal in the
/// divided difference of `log`.
pub const DEGENERATE_GAP: f64 = 1e-8;

/// A symmetric positive-definite matrix together with the shrinkage `eps`
/// that was added when it was built.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    matrix: Matrix,
    eps: f64,
}

impl SpdMatrix {
    /// Wraps a symmetric matrix. Positive definiteness is checked lazily by
    /// the operations that need it ([`spd_log`]).
    pub fn new(mut matrix: Matrix, eps: f64) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::ShapeMismatch(format!(
                "SPD matrix must be square, got {}x{}",
                matrix.rows(),
                matrix.cols()
            )));
        }
        let asym = matrix.max_asymmetry();
        if asym > SYMMETRY_TOL * matrix.max_abs().max(1.0) {
            return Err(Error::NotSymmetric(asym));
        }
        matrix.symmetrize();
        Ok(Self { matrix, eps })
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        let e = sym_eig(&self.matrix)?;
        Ok(*e.values.last().unwrap_or(&f64::INFINITY))
    }
}

/// Principal matrix logarithm `U log(Λ) U^T`.
pub fn spd_log(c: &SpdMatrix) -> Result<Matrix> {
    let e = sym_eig(c.matrix())?;
    check_positive(&e.values)?;
    Ok(e.reconstruct_with(f64::ln))
}

/// Matrix exponential of a symmetric matrix, `U exp(Λ) U^T`.
pub fn sym_exp(s: &Matrix) -> Result<Matrix> {
    let e = sym_eig(s)?;
    Ok(e.reconstruct_with(f64::exp))
}

/// Adjoint of the matrix logarithm at `c` applied to the cotangent `g`:
/// `U (F ∘ (U^T G U)) U^T` with `F` the divided differences of `log` over
/// the eigenvalues of `c`.
pub fn spd_log_vjp(c: &SpdMatrix, g: &Matrix) -> Result<Matrix> {
    if g.rows() != c.dim() || g.cols() != c.dim() {
        return Err(Error::ShapeMismatch(format!(
            "cotangent {}x{} for a {}-dim SPD matrix",
            g.rows(),
            g.cols(),
            c.dim()
        )));
    }
    let e = sym_eig(c.matrix())?;
    check_positive(&e.values)?;
    let n = c.dim();
    let u = &e.vectors;
    let inner = u.transpose().matmul(g)?.matmul(u)?;
    let lam_max = e.values[0];
    let weighted = Matrix::from_fn(n, n, |i, j| {
        inner[(i, j)] * log_divided_difference(e.values[i], e.values[j], lam_max)
    });
    let mut out = u.matmul(&weighted)?.matmul_t(u)?;
    out.symmetrize();
    Ok(out)
}

/// `(log a − log b) / (a − b)`, with the limit `1/a` when the two values are
/// within [`DEGENERATE_GAP`] of each other relative to `scale`.
pub fn log_divided_difference(a: f64, b: f64, scale: f64) -> f64 {
    if (a - b).abs() < DEGENERATE_GAP * scale.abs().max(a.abs()) {
        return 1.0 / a;
    }
    let x = (a - b) / b;
    x.ln_1p() / (a - b)
}

fn check_positive(values: &[f64]) -> Result<()> {
    match values.last() {
        Some(&min) if min <= 0.0 => Err(Error::NotSpd(min)),
        _ => Ok(()),
    }
}
