//! Log-Euclidean distances and the Gaussian kernel on random SPD matrices.
use syntrace::losses::{geodesic_kernel, matrix_distance, Metric};
use syntrace::numerics::{prng, spd_log, sym_exp, Matrix, SpdMatrix};

fn random_spd(n: usize, seed: u64) -> syntrace::Result<SpdMatrix> {
    let mut rng = prng(seed, 0);
    let a = Matrix::from_fn(n, n, |_, _| rng.normal());
    let c = a.matmul_t(&a)?.scale(1.0 / n as f64).add(&Matrix::identity(n).scale(1e-3))?;
    SpdMatrix::new(c, 1e-3)
}

fn main() -> syntrace::Result<()> {
    let (a, b, c) = (random_spd(6, 1)?, random_spd(6, 2)?, random_spd(6, 3)?);
    let d = |x, y| matrix_distance(x, y, Metric::LogEuclidean);
    let (ab, bc, ac) = (d(&a, &b)?, d(&b, &c)?, d(&a, &c)?);
    println!("d(a,b) {ab:.4}  d(b,c) {bc:.4}  d(a,c) {ac:.4}  triangle slack {:.4}", ab + bc - ac);
    for sigma in [2.0, 4.0, 8.0, 16.0] {
        println!("k(a,b; sigma={sigma}) = {:.6}", geodesic_kernel(&a, &b, Metric::LogEuclidean, sigma)?);
    }
    let back = sym_exp(&spd_log(&a)?)?;
    let err = back.sub(a.matrix())?.frobenius_norm() / a.matrix().frobenius_norm();
    println!("exp(log a) relative error {err:.2e}");
    Ok(())
}
