//! Objective terms and forensic scores.
//!
//! Everything here is a forward value computed the straightforward way
//! (dense covariances, dense matrix logarithms). The training path uses the
//! factored route in [`lowrank`], which must agree with these functions.

pub mod lowrank;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionStack, TokenEmbeddings};
use crate::numerics::{spd_log, Matrix, SpdMatrix};

pub const DEFAULT_EPS: f64 = 1e-3;
pub const MIN_SIGMA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance of the current set.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `‖log A − log B‖_F`
    LogEuclidean,
    /// `‖A − B‖_F`
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub sigma: Bandwidth,
    pub metric: Metric,
    pub eps: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            sigma: Bandwidth::Auto,
            metric: Metric::LogEuclidean,
            eps: DEFAULT_EPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda: 0.01,
        }
    }
}

pub fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let n = a.as_slice().len().max(1) as f64;
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Mean over samples of the per-token MSE between student and teacher.
pub fn benign_loss(student: &[TokenEmbeddings], teacher: &[TokenEmbeddings]) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} student vs {} teacher embeddings",
            student.len(),
            teacher.len()
        )));
    }
    if student.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (s, t) in student.iter().zip(teacher) {
        acc += mse(&s.per_token, &t.per_token)?;
    }
    Ok(acc / student.len() as f64)
}

/// The target's per-token rows cut or extended to `len` rows by repeating
/// its last row.
pub fn pad_target(target: &Matrix, len: usize) -> Matrix {
    let last = target.rows().saturating_sub(1);
    Matrix::from_fn(len, target.cols(), |r, c| target[(r.min(last), c)])
}

/// Mean over samples of the MSE to the (padded) teacher embedding of the
/// target prompt.
pub fn backdoor_loss(student_backdoor: &[TokenEmbeddings], teacher_target: &TokenEmbeddings) -> Result<f64> {
    if student_backdoor.is_empty() {
        return Ok(0.0);
    }
    if teacher_target.per_token.rows() == 0 {
        return Err(Error::ShapeMismatch("empty target embedding".into()));
    }
    let mut acc = 0.0;
    for s in student_backdoor {
        let t = pad_target(&teacher_target.per_token, s.per_token.rows());
        acc += mse(&s.per_token, &t)?;
    }
    Ok(acc / student_backdoor.len() as f64)
}

/// Mean Frobenius norm of each map's deviation from the token-mean map.
pub fn frobenius_score(stack: &AttentionStack) -> f64 {
    let m = &stack.maps;
    let l = m.rows();
    if l == 0 {
        return 0.0;
    }
    let cells = m.cols();
    let mean: Vec<f64> = (0..cells)
        .map(|c| (0..l).map(|i| m[(i, c)]).sum::<f64>() / l as f64)
        .collect();
    (0..l)
        .map(|i| {
            m.row(i)
                .iter()
                .zip(&mean)
                .map(|(v, mu)| (v - mu) * (v - mu))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / l as f64
}

/// `(1/(L−1)) Σ (P^i − P̄)(P^i − P̄)^T + eps·I` over flattened maps.
pub fn covariance(stack: &AttentionStack, eps: f64) -> Result<SpdMatrix> {
    let m = &stack.maps;
    let l = m.rows();
    if l < 2 {
        return Err(Error::PromptTooShort(l));
    }
    let n = m.cols();
    let mean: Vec<f64> = (0..n)
        .map(|c| (0..l).map(|i| m[(i, c)]).sum::<f64>() / l as f64)
        .collect();
    let xc = Matrix::from_fn(l, n, |i, c| m[(i, c)] - mean[c]);
    let mut c = xc.transpose().matmul(&xc)?.scale(1.0 / (l - 1) as f64);
    for i in 0..n {
        c[(i, i)] += eps;
    }
    SpdMatrix::new(c, eps)
}

/// A matrix mapped into the flat space where the metric is Euclidean.
fn embed(c: &SpdMatrix, metric: Metric) -> Result<Matrix> {
    match metric {
        Metric::LogEuclidean => spd_log(c),
        Metric::Euclidean => Ok(c.matrix().clone()),
    }
}

pub fn matrix_distance(ci: &SpdMatrix, cj: &SpdMatrix, metric: Metric) -> Result<f64> {
    if ci.dim() != cj.dim() {
        return Err(Error::ShapeMismatch(format!("{} vs {} dims", ci.dim(), cj.dim())));
    }
    Ok(embed(ci, metric)?.sub(&embed(cj, metric)?)?.frobenius_norm())
}

/// `exp(−d(Ci, Cj)² / (2σ²))`.
pub fn geodesic_kernel(ci: &SpdMatrix, cj: &SpdMatrix, metric: Metric, sigma: f64) -> Result<f64> {
    let d = matrix_distance(ci, cj, metric)?;
    Ok(gaussian(d * d, sigma))
}

pub(crate) fn gaussian(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Median of a non-empty list; even counts average the two middle values.
pub(crate) fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median of all pairwise distances, clamped below at [`MIN_SIGMA`].
pub fn median_bandwidth(covs: &[SpdMatrix], metric: Metric) -> Result<f64> {
    if covs.len() < 2 {
        return Err(Error::TooFewMatrices(covs.len()));
    }
    let flat = covs.iter().map(|c| embed(c, metric)).collect::<Result<Vec<_>>>()?;
    Ok(median_of_pairs(&flat)?.max(MIN_SIGMA))
}

fn median_of_pairs(flat: &[Matrix]) -> Result<f64> {
    let mut ds = Vec::with_capacity(flat.len() * (flat.len() - 1) / 2);
    for i in 0..flat.len() {
        for j in (i + 1)..flat.len() {
            ds.push(flat[i].sub(&flat[j])?.frobenius_norm());
        }
    }
    Ok(median(ds))
}

/// Biased V-statistic estimate of the squared kernel MMD.
pub fn kmmd2(c: &[SpdMatrix], chat: &[SpdMatrix], cfg: &KernelConfig) -> Result<f64> {
    if c.is_empty() || chat.is_empty() {
        return Err(Error::EmptySet);
    }
    let a = c.iter().map(|m| embed(m, cfg.metric)).collect::<Result<Vec<_>>>()?;
    let b = chat.iter().map(|m| embed(m, cfg.metric)).collect::<Result<Vec<_>>>()?;
    let sigma = match cfg.sigma {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Auto => {
            let all: Vec<Matrix> = a.iter().chain(&b).cloned().collect();
            if all.len() < 2 {
                return Err(Error::TooFewMatrices(all.len()));
            }
            median_of_pairs(&all)?.max(MIN_SIGMA)
        }
    };
    let mean_k = |x: &[Matrix], y: &[Matrix]| -> Result<f64> {
        let mut acc = 0.0;
        for p in x {
            for q in y {
                let d = p.sub(q)?.frobenius_norm();
                acc += gaussian(d * d, sigma);
            }
        }
        Ok(acc / (x.len() * y.len()) as f64)
    };
    Ok(mean_k(&a, &a)? + mean_k(&b, &b)? - 2.0 * mean_k(&a, &b)?)
}

pub fn total_loss(benign: f64, backdoor: f64, kmmdr: f64, w: &LossWeights) -> f64 {
    benign + w.gamma * backdoor + w.lambda * kmmdr
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{prng, Prng};
    use proptest::prelude::*;

    fn emb(m: Matrix) -> TokenEmbeddings {
        TokenEmbeddings::from_per_token(m)
    }

    fn stack(rows: Vec<Vec<f64>>, dim: usize) -> AttentionStack {
        let l = rows.len();
        let n = rows[0].len();
        AttentionStack {
            maps: Matrix::from_vec(l, n, rows.concat()).unwrap(),
            dim,
        }
    }

    fn random_stack(rng: &mut Prng, l: usize, dim: usize) -> AttentionStack {
        // softmax over tokens per cell
        let n = dim * dim;
        let logits = Matrix::from_fn(l, n, |_, _| rng.normal());
        let mut maps = Matrix::zeros(l, n);
        for c in 0..n {
            let z: f64 = (0..l).map(|i| logits[(i, c)].exp()).sum();
            for i in 0..l {
                maps[(i, c)] = logits[(i, c)].exp() / z;
            }
        }
        AttentionStack { maps, dim }
    }

    pub(crate) fn random_spd(rng: &mut Prng, n: usize) -> SpdMatrix {
        let a = Matrix::from_fn(n, n, |_, _| rng.normal());
        let mut c = a.matmul_t(&a).unwrap().scale(1.0 / n as f64);
        for i in 0..n {
            c[(i, i)] += 0.05;
        }
        SpdMatrix::new(c, 0.05).unwrap()
    }

    #[test]
    fn benign_loss_cases() {
        let mut rng = prng(0, 0);
        let a = Matrix::from_fn(4, 16, |_, _| rng.normal());
        assert_eq!(benign_loss(&[emb(a.clone())], &[emb(a.clone())]).unwrap(), 0.0);
        let ones = Matrix::from_fn(4, 16, |_, _| 1.0);
        let zeros = Matrix::zeros(4, 16);
        assert_eq!(benign_loss(&[emb(ones)], &[emb(zeros)]).unwrap(), 1.0);

        let b = Matrix::from_fn(4, 16, |_, _| rng.normal());
        let c = Matrix::from_fn(3, 16, |_, _| rng.normal());
        let d = Matrix::from_fn(3, 16, |_, _| rng.normal());
        let got = benign_loss(&[emb(a.clone()), emb(c.clone())], &[emb(b.clone()), emb(d.clone())]).unwrap();
        let mut s1 = 0.0;
        for i in 0..64 {
            s1 += (a.as_slice()[i] - b.as_slice()[i]).powi(2);
        }
        let mut s2 = 0.0;
        for i in 0..48 {
            s2 += (c.as_slice()[i] - d.as_slice()[i]).powi(2);
        }
        let expect = 0.5 * (s1 / 64.0 + s2 / 48.0);
        assert!((got - expect).abs() < 1e-14);

        assert!(benign_loss(&[emb(a)], &[emb(c)]).is_err());
    }

    #[test]
    fn backdoor_loss_cases() {
        let t = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64);
        let target = emb(t.clone());
        let padded = pad_target(&t, 5);
        assert_eq!(padded.row(4), t.row(2));
        assert_eq!(pad_target(&t, 2).row(1), t.row(1));
        assert_eq!(backdoor_loss(&[emb(padded.clone())], &target).unwrap(), 0.0);
        let off = Matrix::from_fn(5, 4, |r, c| padded[(r, c)] + 0.3);
        let got = backdoor_loss(&[emb(off)], &target).unwrap();
        assert!((got - 0.09).abs() < 1e-12);
    }

    #[test]
    fn frobenius_cases() {
        let s = stack(vec![vec![0.5; 4], vec![0.5; 4]], 2);
        assert_eq!(frobenius_score(&s), 0.0);

        let base = [0.1, 0.2, 0.3, 0.4];
        let delta = [0.2, -0.1, 0.4, 0.0];
        let a: Vec<f64> = base.iter().zip(&delta).map(|(b, d)| b + d).collect();
        let s = stack(vec![a, base.to_vec()], 2);
        let half: f64 = delta.iter().map(|d| (d / 2.0) * (d / 2.0)).sum::<f64>().sqrt();
        assert!((frobenius_score(&s) - half).abs() < 1e-15);

        let mut rng = prng(2, 0);
        let s = random_stack(&mut rng, 7, 3);
        let mut oracle = 0.0;
        for i in 0..7 {
            let mut sq = 0.0;
            for x in 0..3 {
                for y in 0..3 {
                    let mut mean = 0.0;
                    for j in 0..7 {
                        mean += s.map(j)[(x, y)];
                    }
                    mean /= 7.0;
                    sq += (s.map(i)[(x, y)] - mean).powi(2);
                }
            }
            oracle += sq.sqrt();
        }
        assert!((frobenius_score(&s) - oracle / 7.0).abs() < 1e-14);
    }

    #[test]
    fn covariance_cases() {
        let s = stack(vec![vec![0.25; 4]; 3], 2);
        let c = covariance(&s, 1e-3).unwrap();
        assert!(c.matrix().sub(&Matrix::identity(4).scale(1e-3)).unwrap().max_abs() < 1e-18);

        let s = stack(vec![vec![0.2], vec![0.8]], 1);
        let c = covariance(&s, 1e-3).unwrap();
        assert!((c.matrix()[(0, 0)] - (0.18 + 1e-3)).abs() < 1e-15);

        let s = stack(vec![vec![1.0]], 1);
        assert!(matches!(covariance(&s, 1e-3), Err(Error::PromptTooShort(1))));

        let mut rng = prng(3, 0);
        let s = random_stack(&mut rng, 6, 3);
        let c = covariance(&s, 1e-3).unwrap();
        for a in 0..9 {
            for b in 0..9 {
                let ma: f64 = (0..6).map(|i| s.maps[(i, a)]).sum::<f64>() / 6.0;
                let mb: f64 = (0..6).map(|i| s.maps[(i, b)]).sum::<f64>() / 6.0;
                let mut acc = 0.0;
                for i in 0..6 {
                    acc += (s.maps[(i, a)] - ma) * (s.maps[(i, b)] - mb);
                }
                let expect = acc / 5.0 + if a == b { 1e-3 } else { 0.0 };
                assert!((c.matrix()[(a, b)] - expect).abs() < 1e-15);
            }
        }
        assert!(c.min_eigenvalue().unwrap() >= 0.5e-3);
    }

    #[test]
    fn covariance_shift_invariance() {
        let mut rng = prng(4, 0);
        let s = random_stack(&mut rng, 5, 2);
        let mut shifted = s.clone();
        for v in shifted.maps.as_mut_slice() {
            *v += 0.7;
        }
        let a = covariance(&s, 1e-3).unwrap();
        let b = covariance(&shifted, 1e-3).unwrap();
        assert!(a.matrix().sub(b.matrix()).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn kernel_cases() {
        let mut rng = prng(5, 0);
        let a = random_spd(&mut rng, 6);
        let b = random_spd(&mut rng, 6);
        assert_eq!(geodesic_kernel(&a, &a, Metric::LogEuclidean, 0.5).unwrap(), 1.0);
        let kab = geodesic_kernel(&a, &b, Metric::LogEuclidean, 0.5).unwrap();
        let kba = geodesic_kernel(&b, &a, Metric::LogEuclidean, 0.5).unwrap();
        assert_eq!(kab, kba);

        let sigma = median_bandwidth(&[a.clone(), b.clone()], Metric::LogEuclidean).unwrap();
        let la = spd_log(&a).unwrap();
        let lb = spd_log(&b).unwrap();
        let d2: f64 = la.as_slice().iter().zip(lb.as_slice()).map(|(x, y)| (x - y).powi(2)).sum();
        assert!((sigma - d2.sqrt()).abs() < 1e-12);
        let k = geodesic_kernel(&a, &b, Metric::LogEuclidean, sigma).unwrap();
        assert!((k - (-0.5f64).exp()).abs() < 1e-12);

        let ke = geodesic_kernel(&a, &b, Metric::Euclidean, 1.0).unwrap();
        let de = a.matrix().sub(b.matrix()).unwrap().frobenius_norm();
        assert!((ke - (-de * de / 2.0).exp()).abs() < 1e-14);
    }

    #[test]
    fn median_bandwidth_cases() {
        let i = SpdMatrix::new(Matrix::identity(2), 0.0).unwrap();
        assert_eq!(median_bandwidth(&[i.clone(), i.clone()], Metric::Euclidean).unwrap(), MIN_SIGMA);
        // distances 1, 2, 3 along one axis: 0, 1, 3 placed on the diagonal
        let at = |x: f64| SpdMatrix::new(Matrix::from_diag(&[1.0 + x, 1.0]), 0.0).unwrap();
        let m = median_bandwidth(&[at(0.0), at(1.0), at(3.0)], Metric::Euclidean).unwrap();
        assert!((m - 2.0).abs() < 1e-15);
        assert!(matches!(
            median_bandwidth(&[i], Metric::Euclidean),
            Err(Error::TooFewMatrices(1))
        ));
    }

    #[test]
    fn kmmd_cases() {
        let mut rng = prng(6, 0);
        let xs: Vec<SpdMatrix> = (0..3).map(|_| random_spd(&mut rng, 5)).collect();
        let ys: Vec<SpdMatrix> = (0..3).map(|_| random_spd(&mut rng, 5)).collect();
        let cfg = KernelConfig::default();
        assert_eq!(kmmd2(&xs, &xs, &cfg).unwrap(), 0.0);
        assert!(matches!(kmmd2(&[], &xs, &cfg), Err(Error::EmptySet)));

        let fixed = KernelConfig {
            sigma: Bandwidth::Fixed(0.8),
            ..cfg
        };
        let got = kmmd2(&xs, &ys, &fixed).unwrap();
        let k = |a: &SpdMatrix, b: &SpdMatrix| geodesic_kernel(a, b, Metric::LogEuclidean, 0.8).unwrap();
        let mut xx = 0.0;
        let mut yy = 0.0;
        let mut xy = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                xx += k(&xs[i], &xs[j]);
                yy += k(&ys[i], &ys[j]);
                xy += k(&xs[i], &ys[j]);
            }
        }
        let expect = xx / 9.0 + yy / 9.0 - 2.0 * xy / 9.0;
        assert!((got - expect).abs() < 1e-12);
        assert!(got >= -1e-9);
        let swapped = kmmd2(&ys, &xs, &fixed).unwrap();
        assert!((got - swapped).abs() < 1e-12);
    }

    #[test]
    fn total_loss_cases() {
        let w = LossWeights { gamma: 1.0, lambda: 0.01 };
        assert!((total_loss(1.0, 2.0, 3.0, &w) - 3.03).abs() < 1e-12);
        let off = LossWeights { gamma: 0.0, lambda: 0.0 };
        assert_eq!(total_loss(1.5, 2.0, 3.0, &off), 1.5);
    }

    proptest! {
        #[test]
        fn total_loss_is_linear(b in -5.0..5.0f64, k in -5.0..5.0f64, m in -5.0..5.0f64,
                                g in 0.0..3.0f64, l in 0.0..3.0f64, s in -2.0..2.0f64) {
            let w = LossWeights { gamma: g, lambda: l };
            let lhs = total_loss(s * b, s * k, s * m, &w);
            let rhs = s * total_loss(b, k, m, &w);
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn frobenius_and_covariance_permutation_invariant(seed in 0u64..1000) {
            let mut rng = prng(seed, 1);
            let s = random_stack(&mut rng, 6, 2);
            let mut perm: Vec<usize> = (0..6).collect();
            rng.shuffle(&mut perm);
            let p = AttentionStack {
                maps: Matrix::from_fn(6, 4, |i, c| s.maps[(perm[i], c)]),
                dim: 2,
            };
            prop_assert!((frobenius_score(&s) - frobenius_score(&p)).abs() < 1e-14);
            let a = covariance(&s, 1e-3).unwrap();
            let b = covariance(&p, 1e-3).unwrap();
            prop_assert!(a.matrix().sub(b.matrix()).unwrap().max_abs() < 1e-15);
        }

        #[test]
        fn kernel_in_unit_interval(seed in 0u64..1000, sigma in 0.5..5.0f64) {
            let mut rng = prng(seed, 2);
            let a = random_spd(&mut rng, 4);
            let b = random_spd(&mut rng, 4);
            let k = geodesic_kernel(&a, &b, Metric::LogEuclidean, sigma).unwrap();
            prop_assert!(k > 0.0 && k <= 1.0);
            let d = matrix_distance(&a, &b, Metric::LogEuclidean).unwrap();
            prop_assert!(d > 1e-9);
            prop_assert!(k < 1.0);
            prop_assert_eq!(geodesic_kernel(&a, &a, Metric::LogEuclidean, sigma).unwrap(), 1.0);
        }
    }
}
