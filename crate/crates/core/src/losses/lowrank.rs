//! Factored covariance logarithms and the KMMD gradient.
//!
//! A map stack with `L` tokens gives a covariance `eps·I + S` where `S` has
//! rank at most `L − 1`. Writing `S = Σ μ_r v_r v_r^T` (from the small
//! `L × L` Gram matrix of the centred maps), the log is
//! `log(eps)·I + Σ log(1 + μ_r/eps) v_r v_r^T`. The `log(eps)·I` part is shared
//! by every matrix of a batch and drops out of all distances, so each matrix
//! is carried as `(V, a)` with `X = V^T diag(a) V`.

use crate::error::{Error, Result};
use crate::numerics::{dot, log_divided_difference, sym_eig, Matrix};

use super::{gaussian, median, Bandwidth, Metric, MIN_SIGMA};

/// Sample-covariance eigenvalues below this fraction of the largest are
/// treated as zero.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct CovFactor {
    eps: f64,
    metric: Metric,
    /// Centred maps, one row per token.
    xc: Matrix,
    /// Orthonormal basis of the row space, one row per direction.
    basis: Matrix,
    mu: Vec<f64>,
    coef: Vec<f64>,
}

impl CovFactor {
    /// `maps` holds one flattened attention map per row.
    pub fn new(maps: &Matrix, eps: f64, metric: Metric) -> Result<Self> {
        let l = maps.rows();
        if l < 2 {
            return Err(Error::PromptTooShort(l));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("shrinkage eps must be positive, got {eps}")));
        }
        let n = maps.cols();
        let mean: Vec<f64> = (0..n)
            .map(|c| (0..l).map(|i| maps[(i, c)]).sum::<f64>() / l as f64)
            .collect();
        let xc = Matrix::from_fn(l, n, |i, c| maps[(i, c)] - mean[c]);
        let denom = (l - 1) as f64;
        let gram = xc.matmul_t(&xc)?.scale(1.0 / denom);
        let e = sym_eig(&gram)?;
        let top = e.values.first().copied().unwrap_or(0.0);
        let mut rows = Vec::new();
        let mut mu = Vec::new();
        if top > f64::MIN_POSITIVE {
            for (k, &m) in e.values.iter().enumerate() {
                if m <= RANK_TOL * top {
                    break;
                }
                let scale = 1.0 / (denom * m).sqrt();
                for c in 0..n {
                    let v: f64 = (0..l).map(|i| xc[(i, c)] * e.vectors[(i, k)]).sum();
                    rows.push(v * scale);
                }
                mu.push(m);
            }
        }
        let basis = Matrix::from_vec(mu.len(), n, rows)?;
        let coef = mu
            .iter()
            .map(|&m| match metric {
                Metric::LogEuclidean => (m / eps).ln_1p(),
                Metric::Euclidean => m,
            })
            .collect();
        Ok(Self {
            eps,
            metric,
            xc,
            basis,
            mu,
            coef,
        })
    }

    pub fn rank(&self) -> usize {
        self.mu.len()
    }

    pub fn tokens(&self) -> usize {
        self.xc.rows()
    }

    /// Nonzero eigenvalues of the (unshrunk) sample covariance.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.mu
    }

    /// `Σ a_r v_r v_r^T` as a dense matrix: the log-covariance minus
    /// `log(eps)·I`, or the covariance minus `eps·I`.
    pub fn dense(&self) -> Matrix {
        let n = self.xc.cols();
        Matrix::from_fn(n, n, |p, q| {
            (0..self.rank())
                .map(|r| self.coef[r] * self.basis[(r, p)] * self.basis[(r, q)])
                .sum()
        })
    }

    fn norm2(&self) -> f64 {
        self.coef.iter().map(|a| a * a).sum()
    }
}

/// `V_i V_j^T`.
fn cross(a: &CovFactor, b: &CovFactor) -> Matrix {
    Matrix::from_fn(a.rank(), b.rank(), |r, s| dot(a.basis.row(r), b.basis.row(s)))
}

/// `tr(X_a X_b)` from the basis overlaps.
fn inner(a: &CovFactor, b: &CovFactor, w: &Matrix) -> f64 {
    let mut acc = 0.0;
    for r in 0..a.rank() {
        for s in 0..b.rank() {
            let o = w[(r, s)];
            acc += a.coef[r] * b.coef[s] * o * o;
        }
    }
    acc
}

/// Squared distances between all factors, with zero diagonal.
pub fn pairwise_sq_distances(all: &[&CovFactor]) -> Result<(Matrix, Vec<Vec<Matrix>>)> {
    let n = all.len();
    if let Some(first) = all.first() {
        if all.iter().any(|f| f.metric != first.metric || f.xc.cols() != first.xc.cols()) {
            return Err(Error::ShapeMismatch("factors differ in metric or dimension".into()));
        }
    }
    let norms: Vec<f64> = all.iter().map(|f| f.norm2()).collect();
    let mut overlaps: Vec<Vec<Matrix>> = vec![vec![Matrix::zeros(0, 0); n]; n];
    let mut d2 = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let w = cross(all[i], all[j]);
            let v = (norms[i] + norms[j] - 2.0 * inner(all[i], all[j], &w)).max(0.0);
            d2[(i, j)] = v;
            d2[(j, i)] = v;
            overlaps[j][i] = w.transpose();
            overlaps[i][j] = w;
        }
    }
    Ok((d2, overlaps))
}

/// Median of the pairwise distances (not squared), clamped.
pub fn median_sigma(d2: &Matrix) -> Result<f64> {
    let n = d2.rows();
    if n < 2 {
        return Err(Error::TooFewMatrices(n));
    }
    let mut ds = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            ds.push(d2[(i, j)].sqrt());
        }
    }
    Ok(median(ds).max(MIN_SIGMA))
}

#[derive(Debug, Clone)]
pub struct KmmdOutput {
    pub value: f64,
    pub sigma: f64,
    /// Derivative of `value` with respect to each input's map rows, in the
    /// order benign then backdoor. Empty when gradients were not requested.
    pub grads: Vec<Matrix>,
}

/// Biased KMMD² between two sets of factored covariances, optionally with
/// its derivative with respect to every map. The bandwidth is held fixed
/// when differentiating.
pub fn kmmd2_factored(
    benign: &[CovFactor],
    backdoor: &[CovFactor],
    sigma: Bandwidth,
    want_grad: bool,
) -> Result<KmmdOutput> {
    if benign.is_empty() || backdoor.is_empty() {
        return Err(Error::EmptySet);
    }
    let all: Vec<&CovFactor> = benign.iter().chain(backdoor).collect();
    let n = all.len();
    let n1 = benign.len();
    let (d2, overlaps) = pairwise_sq_distances(&all)?;
    let sigma = match sigma {
        Bandwidth::Fixed(s) if s > 0.0 => s,
        Bandwidth::Fixed(s) => return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {s}"))),
        Bandwidth::Auto => median_sigma(&d2)?,
    };
    let k = Matrix::from_fn(n, n, |i, j| gaussian(d2[(i, j)], sigma));
    let weight = |i: usize, j: usize| -> f64 {
        let (n1f, n2f) = (n1 as f64, (n - n1) as f64);
        match (i < n1, j < n1) {
            (true, true) => 1.0 / (n1f * n1f),
            (false, false) => 1.0 / (n2f * n2f),
            _ => -1.0 / (n1f * n2f),
        }
    };
    let block = |r0: usize, r1: usize, c0: usize, c1: usize| -> f64 {
        let mut acc = 0.0;
        for i in r0..r1 {
            for j in c0..c1 {
                acc += k[(i, j)];
            }
        }
        acc / ((r1 - r0) * (c1 - c0)) as f64
    };
    let value = block(0, n1, 0, n1) + block(n1, n, n1, n) - 2.0 * block(0, n1, n1, n);
    if !want_grad {
        return Ok(KmmdOutput {
            value,
            sigma,
            grads: Vec::new(),
        });
    }

    // dvalue/dX_i = Σ_j c_ij (X_i − X_j)
    let c = Matrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            -2.0 * weight(i, j) * k[(i, j)] / (sigma * sigma)
        }
    });
    let grads = (0..n)
        .map(|i| factor_vjp(all[i], &all, i, &c, &overlaps))
        .collect::<Result<Vec<_>>>()?;
    Ok(KmmdOutput { value, sigma, grads })
}

/// Pulls the cotangent `G_i = s_i X_i − Σ_j c_ij X_j` of `X_i` back to the
/// map rows of factor `i`.
fn factor_vjp(
    fi: &CovFactor,
    all: &[&CovFactor],
    i: usize,
    c: &Matrix,
    overlaps: &[Vec<Matrix>],
) -> Result<Matrix> {
    let r = fi.rank();
    let cells = fi.xc.cols();
    let l = fi.tokens();
    if r == 0 {
        return Ok(Matrix::zeros(l, cells));
    }
    let s_i: f64 = (0..all.len()).map(|j| c[(i, j)]).sum();

    // V_i G_i and H_i = V_i G_i V_i^T
    let mut vg = Matrix::from_fn(r, cells, |p, q| s_i * fi.coef[p] * fi.basis[(p, q)]);
    let mut h = Matrix::from_diag(&fi.coef.iter().map(|a| s_i * a).collect::<Vec<_>>());
    for (j, fj) in all.iter().enumerate() {
        let cij = c[(i, j)];
        if j == i || cij == 0.0 || fj.rank() == 0 {
            continue;
        }
        let w = &overlaps[i][j];
        // W diag(a_j)
        let wa = Matrix::from_fn(r, fj.rank(), |p, q| w[(p, q)] * fj.coef[q]);
        let contrib = wa.matmul(&fj.basis)?;
        for (dst, src) in vg.as_mut_slice().iter_mut().zip(contrib.as_slice()) {
            *dst -= cij * src;
        }
        let hh = wa.matmul_t(w)?;
        for (dst, src) in h.as_mut_slice().iter_mut().zip(hh.as_slice()) {
            *dst -= cij * src;
        }
    }
    h.symmetrize();

    let inner = match fi.metric {
        Metric::Euclidean => vg,
        Metric::LogEuclidean => {
            let lam: Vec<f64> = fi.mu.iter().map(|m| fi.eps + m).collect();
            let top = lam[0];
            let fh = Matrix::from_fn(r, r, |p, q| h[(p, q)] * log_divided_difference(lam[p], lam[q], top));
            let f: Vec<f64> = lam.iter().map(|&x| log_divided_difference(x, fi.eps, top)).collect();
            let hv = h.matmul(&fi.basis)?;
            let mut out = fh.matmul(&fi.basis)?;
            for p in 0..r {
                for q in 0..cells {
                    out[(p, q)] += f[p] * (vg[(p, q)] - hv[(p, q)]);
                }
            }
            out
        }
    };
    let xcv = fi.xc.matmul_t(&fi.basis)?;
    Ok(xcv.matmul(&inner)?.scale(2.0 / (l - 1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{covariance, kmmd2, KernelConfig};
    use crate::model::AttentionStack;
    use crate::numerics::{prng, spd_log, Prng};

    fn softmax_maps(rng: &mut Prng, l: usize, cells: usize, spread: f64) -> Matrix {
        let logits = Matrix::from_fn(l, cells, |_, _| spread * rng.normal());
        let mut maps = Matrix::zeros(l, cells);
        for c in 0..cells {
            let z: f64 = (0..l).map(|i| logits[(i, c)].exp()).sum();
            for i in 0..l {
                maps[(i, c)] = logits[(i, c)].exp() / z;
            }
        }
        maps
    }

    fn stack(maps: &Matrix, dim: usize) -> AttentionStack {
        AttentionStack {
            maps: maps.clone(),
            dim,
        }
    }

    #[test]
    fn dense_embedding_matches_dense_log() {
        let mut rng = prng(1, 0);
        let maps = softmax_maps(&mut rng, 7, 16, 1.0);
        let eps = 1e-3;
        let f = CovFactor::new(&maps, eps, Metric::LogEuclidean).unwrap();
        assert_eq!(f.rank(), 6);
        let dense = spd_log(&covariance(&stack(&maps, 4), eps).unwrap()).unwrap();
        let mut expect = dense.clone();
        for i in 0..16 {
            expect[(i, i)] -= eps.ln();
        }
        let err = f.dense().sub(&expect).unwrap().max_abs();
        assert!(err < 1e-9, "max error {err}");

        let fe = CovFactor::new(&maps, eps, Metric::Euclidean).unwrap();
        let mut cov = covariance(&stack(&maps, 4), eps).unwrap().matrix().clone();
        for i in 0..16 {
            cov[(i, i)] -= eps;
        }
        assert!(fe.dense().sub(&cov).unwrap().max_abs() < 1e-13);
    }

    #[test]
    fn identical_maps_have_rank_zero() {
        let maps = Matrix::from_fn(4, 9, |_, _| 0.25);
        let f = CovFactor::new(&maps, 1e-3, Metric::LogEuclidean).unwrap();
        assert_eq!(f.rank(), 0);
    }

    fn sets(rng: &mut Prng, n1: usize, n2: usize, cells: usize) -> (Vec<Matrix>, Vec<Matrix>) {
        let a = (0..n1).map(|i| softmax_maps(rng, 5 + i % 3, cells, 1.0)).collect();
        let b = (0..n2).map(|i| softmax_maps(rng, 6 + i % 2, cells, 0.4)).collect();
        (a, b)
    }

    fn factors(ms: &[Matrix], metric: Metric) -> Vec<CovFactor> {
        ms.iter().map(|m| CovFactor::new(m, 1e-3, metric).unwrap()).collect()
    }

    #[test]
    fn value_matches_dense_route() {
        for metric in [Metric::LogEuclidean, Metric::Euclidean] {
            let mut rng = prng(2, 0);
            let (a, b) = sets(&mut rng, 3, 4, 16);
            let fa = factors(&a, metric);
            let fb = factors(&b, metric);
            let ca: Vec<_> = a.iter().map(|m| covariance(&stack(m, 4), 1e-3).unwrap()).collect();
            let cb: Vec<_> = b.iter().map(|m| covariance(&stack(m, 4), 1e-3).unwrap()).collect();
            let cfg = KernelConfig {
                sigma: Bandwidth::Auto,
                metric,
                eps: 1e-3,
            };
            let dense = kmmd2(&ca, &cb, &cfg).unwrap();
            let fast = kmmd2_factored(&fa, &fb, Bandwidth::Auto, false).unwrap();
            assert!((dense - fast.value).abs() < 1e-9, "{metric:?}: {dense} vs {}", fast.value);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for metric in [Metric::LogEuclidean, Metric::Euclidean] {
            let mut rng = prng(3, 0);
            let (a, b) = sets(&mut rng, 2, 3, 9);
            let sigma = kmmd2_factored(&factors(&a, metric), &factors(&b, metric), Bandwidth::Auto, false)
                .unwrap()
                .sigma;
            let fixed = Bandwidth::Fixed(sigma);
            let out = kmmd2_factored(&factors(&a, metric), &factors(&b, metric), fixed, true).unwrap();
            let all: Vec<Matrix> = a.iter().chain(&b).cloned().collect();
            let eval = |ms: &[Matrix]| -> f64 {
                let (x, y) = ms.split_at(a.len());
                kmmd2_factored(&factors(x, metric), &factors(y, metric), fixed, false)
                    .unwrap()
                    .value
            };
            let h = 1e-6;
            let mut num_sq = 0.0;
            let mut diff_sq = 0.0;
            for s in 0..all.len() {
                for e in 0..all[s].as_slice().len() {
                    let mut plus = all.clone();
                    let mut minus = all.clone();
                    plus[s].as_mut_slice()[e] += h;
                    minus[s].as_mut_slice()[e] -= h;
                    let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let ana = out.grads[s].as_slice()[e];
                    num_sq += num * num;
                    diff_sq += (num - ana) * (num - ana);
                }
            }
            let rel = (diff_sq / num_sq).sqrt();
            assert!(rel < 1e-5, "{metric:?}: relative error {rel}");
        }
    }

    #[test]
    fn identical_sets_give_zero_and_zero_gradient() {
        let mut rng = prng(4, 0);
        let (a, _) = sets(&mut rng, 3, 0, 16);
        let fa = factors(&a, Metric::LogEuclidean);
        let out = kmmd2_factored(&fa, &fa, Bandwidth::Auto, true).unwrap();
        assert!(out.value.abs() < 1e-12);
        for g in &out.grads {
            assert!(g.max_abs() < 1e-10);
        }
    }
}
