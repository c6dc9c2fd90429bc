//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use crate::error::{Error, Result};

use super::Matrix;

/// Maximum number of full sweeps before giving up.
pub const MAX_SWEEPS: usize = 64;

/// Absolute symmetry tolerance (scaled by `max(1, max|S|)`).
pub const SYMMETRY_TOL: f64 = 1e-6;

/// Eigenvalues in descending order with matching orthonormal eigenvectors
/// stored as the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymEig {
    /// `U diag(f(λ)) U^T`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let mapped: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        let u = &self.vectors;
        let mut out = Matrix::zeros(n, n);
        for r in 0..n {
            for c in r..n {
                let mut acc = 0.0;
                for (k, &lam) in mapped.iter().enumerate() {
                    acc += u[(r, k)] * lam * u[(c, k)];
                }
                out[(r, c)] = acc;
                out[(c, r)] = acc;
            }
        }
        out
    }
}

pub fn sym_eig(s: &Matrix) -> Result<SymEig> {
    if !s.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "eigendecomposition of a {}x{} matrix",
            s.rows(),
            s.cols()
        )));
    }
    let asym = s.max_asymmetry();
    if asym > SYMMETRY_TOL * s.max_abs().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    let n = s.rows();
    let mut a = s.clone();
    a.symmetrize();
    let mut v = Matrix::identity(n);

    let scale = a.frobenius_norm();
    let mut converged = n <= 1 || scale == 0.0;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence(MAX_SWEEPS));
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
        let off: f64 = (0..n)
            .flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c)))
            .map(|(r, c)| a[(r, c)] * a[(r, c)])
            .sum::<f64>()
            .sqrt();
        converged = off <= 1e-15 * scale;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEig { values, vectors })
}

/// One Jacobi rotation annihilating `a[p][q]`.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let apq = a[(p, q)];
    if apq == 0.0 {
        return;
    }
    let app = a[(p, p)];
    let aqq = a[(q, q)];
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let n = a.rows();

    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;

    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::prng;

    fn random_symmetric(n: usize, seed: u64) -> Matrix {
        let mut rng = prng(seed, 7);
        let mut m = Matrix::from_fn(n, n, |_, _| rng.normal());
        m.symmetrize();
        m
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let e = sym_eig(&Matrix::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_is_axis_aligned() {
        let e = sym_eig(&Matrix::from_diag(&[1.0, 3.0])).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
        assert_eq!(e.vectors[(1, 0)].abs(), 1.0);
        assert_eq!(e.vectors[(0, 1)].abs(), 1.0);
    }

    #[test]
    fn rejects_asymmetric() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        assert!(matches!(sym_eig(&m), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn random_64_reconstructs() {
        let s = random_symmetric(64, 3);
        let e = sym_eig(&s).unwrap();
        let back = e.reconstruct_with(|v| v);
        let resid = back.sub(&s).unwrap().frobenius_norm();
        assert!(resid <= 1e-5 * s.frobenius_norm(), "residual {resid}");

        let utu = e.vectors.transpose().matmul(&e.vectors).unwrap();
        let ortho = utu.sub(&Matrix::identity(64)).unwrap().max_abs();
        assert!(ortho < 1e-6, "orthogonality error {ortho}");

        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        let trace_rel = (e.values.iter().sum::<f64>() - s.trace()).abs() / s.trace().abs().max(1.0);
        assert!(trace_rel < 1e-4);
    }

    #[test]
    fn known_two_by_two() {
        let m = Matrix::from_vec(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let e = sym_eig(&m).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-12);
        assert!((e.values[1] - 1.0).abs() < 1e-12);
    }
}
