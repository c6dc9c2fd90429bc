//! Hand-derived reverse pass through the encoder, the cross-attention
//! simulator and all three loss terms.

use crate::error::{Error, Result};
use crate::losses::lowrank::{kmmd2_factored, CovFactor};
use crate::losses::{pad_target, KernelConfig, LossWeights};
use crate::numerics::Matrix;

use super::{cross_attention_cached, encode_cached, CrossCache, EncodeCache, EncoderParams, SimulatorBank};

/// A benign prompt with its frozen teacher output.
#[derive(Debug, Clone)]
pub struct BenignItem {
    pub ids: Vec<usize>,
    pub teacher: Matrix,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub benign: Vec<BenignItem>,
    pub backdoor: Vec<Vec<usize>>,
    /// Teacher per-token embedding of the target prompt.
    pub target: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub benign_weight: f64,
    pub weights: LossWeights,
    pub kernel: KernelConfig,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            benign_weight: 1.0,
            weights: LossWeights::default(),
            kernel: KernelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub benign: f64,
    pub backdoor: f64,
    pub kmmdr: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub losses: LossBreakdown,
    /// Bandwidth used by the KMMD term; `None` when it was not computed.
    pub sigma: Option<f64>,
    pub grads: EncoderParams,
}

fn add_into(dst: &mut Matrix, src: &Matrix) {
    for (a, b) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *a += b;
    }
}

/// Loss value and exact gradients with respect to the student parameters.
/// The KMMD term is skipped entirely when `lambda == 0`.
pub fn forward_backward(
    params: &EncoderParams,
    bank: &SimulatorBank,
    batch: &Batch,
    spec: &LossSpec,
) -> Result<StepResult> {
    let d = params.d();
    let n1 = batch.benign.len();
    let n2 = batch.backdoor.len();
    let benign_caches = batch
        .benign
        .iter()
        .map(|b| encode_cached(params, &b.ids))
        .collect::<Result<Vec<_>>>()?;
    let backdoor_caches = batch
        .backdoor
        .iter()
        .map(|ids| encode_cached(params, ids))
        .collect::<Result<Vec<_>>>()?;

    let mut dys: Vec<Matrix> = Vec::with_capacity(n1 + n2);

    let mut benign = 0.0;
    for (c, item) in benign_caches.iter().zip(&batch.benign) {
        if c.y.rows() != item.teacher.rows() || c.y.cols() != item.teacher.cols() {
            return Err(Error::ShapeMismatch("teacher output does not match prompt".into()));
        }
        let (loss, grad) = mse_and_grad(&c.y, &item.teacher, spec.benign_weight / n1 as f64);
        benign += loss / n1 as f64;
        dys.push(grad);
    }

    let mut backdoor = 0.0;
    for c in &backdoor_caches {
        let target = pad_target(&batch.target, c.y.rows());
        if target.cols() != d {
            return Err(Error::ShapeMismatch("target width differs from model width".into()));
        }
        let (loss, grad) = mse_and_grad(&c.y, &target, spec.weights.gamma / n2 as f64);
        backdoor += loss / n2 as f64;
        dys.push(grad);
    }

    let mut kmmdr = 0.0;
    let mut sigma = None;
    if spec.weights.lambda != 0.0 {
        let crosses = benign_caches
            .iter()
            .chain(&backdoor_caches)
            .map(|c| cross_attention_cached(&c.y, bank))
            .collect::<Result<Vec<_>>>()?;
        let factors = crosses
            .iter()
            .map(|(s, _)| CovFactor::new(&s.maps, spec.kernel.eps, spec.kernel.metric))
            .collect::<Result<Vec<_>>>()?;
        let (fb, fk) = factors.split_at(n1);
        let out = kmmd2_factored(fb, fk, spec.kernel.sigma, true)?;
        kmmdr = out.value;
        sigma = Some(out.sigma);
        for ((dy, (_, cache)), dmaps) in dys.iter_mut().zip(&crosses).zip(&out.grads) {
            let back = cross_attention_backward(bank, cache, &dmaps.scale(spec.weights.lambda))?;
            add_into(dy, &back);
        }
    }

    let mut grads = params.zeros_like();
    for (cache, dy) in benign_caches.iter().chain(&backdoor_caches).zip(&dys) {
        encoder_backward(params, cache, dy, &mut grads)?;
    }
    let total = spec.benign_weight * benign + spec.weights.gamma * backdoor + spec.weights.lambda * kmmdr;
    Ok(StepResult {
        losses: LossBreakdown {
            benign,
            backdoor,
            kmmdr,
            total,
        },
        sigma,
        grads,
    })
}

/// MSE of `y` against `t` and `scale · dMSE/dy`.
fn mse_and_grad(y: &Matrix, t: &Matrix, scale: f64) -> (f64, Matrix) {
    let n = y.as_slice().len() as f64;
    let diff = y.sub(t).expect("shapes checked by caller");
    let loss = diff.as_slice().iter().map(|v| v * v).sum::<f64>() / n;
    (loss, diff.scale(2.0 * scale / n))
}

/// Cotangent of the map rows (`L × D²`) pulled back to the encoder output.
pub fn cross_attention_backward(bank: &SimulatorBank, cache: &CrossCache, dmaps: &Matrix) -> Result<Matrix> {
    let l = cache.keys.rows();
    let d = cache.keys.cols();
    let t = cache.attn.len() as f64;
    let inv = 1.0 / (d as f64).sqrt();
    let mut dkeys = Matrix::zeros(l, d);
    for (a, q) in cache.attn.iter().zip(&bank.queries) {
        let cells = a.rows();
        // dZ = A ⊙ (dA − rowsum(dA ⊙ A)), with dA = dmaps^T / T
        let mut dz = Matrix::zeros(cells, l);
        for p in 0..cells {
            let mut inner = 0.0;
            for i in 0..l {
                inner += dmaps[(i, p)] / t * a[(p, i)];
            }
            for i in 0..l {
                dz[(p, i)] = a[(p, i)] * (dmaps[(i, p)] / t - inner);
            }
        }
        add_into(&mut dkeys, &dz.transpose().matmul(q)?.scale(inv));
    }
    dkeys.matmul_t(&bank.wkx)
}

/// Accumulates parameter gradients for one prompt given `dy = dL/dy`.
pub fn encoder_backward(params: &EncoderParams, c: &EncodeCache, dy: &Matrix, grads: &mut EncoderParams) -> Result<()> {
    let d = params.d();
    let l = c.ids.len();

    // y = x1 + u W2, u = tanh(x1 W1)
    add_into(&mut grads.w2, &c.u.transpose().matmul(dy)?);
    let mut dz = dy.matmul_t(&params.w2)?;
    for (g, u) in dz.as_mut_slice().iter_mut().zip(c.u.as_slice()) {
        *g *= 1.0 - u * u;
    }
    add_into(&mut grads.w1, &c.x1.transpose().matmul(&dz)?);
    let dx1 = dy.add(&dz.matmul_t(&params.w1)?)?;

    // x1 = x0 + A v, A = softmax(q k^T / √d)
    let da = dx1.matmul_t(&c.v)?;
    let dv = c.attn.transpose().matmul(&dx1)?;
    let mut ds = Matrix::zeros(l, l);
    for i in 0..l {
        let inner: f64 = (0..l).map(|j| da[(i, j)] * c.attn[(i, j)]).sum();
        for j in 0..l {
            ds[(i, j)] = c.attn[(i, j)] * (da[(i, j)] - inner);
        }
    }
    let inv = 1.0 / (d as f64).sqrt();
    let dq = ds.matmul(&c.k)?.scale(inv);
    let dk = ds.transpose().matmul(&c.q)?.scale(inv);

    let x0t = c.x0.transpose();
    add_into(&mut grads.wq, &x0t.matmul(&dq)?);
    add_into(&mut grads.wk, &x0t.matmul(&dk)?);
    add_into(&mut grads.wv, &x0t.matmul(&dv)?);

    let mut dx0 = dx1;
    add_into(&mut dx0, &dq.matmul_t(&params.wq)?);
    add_into(&mut dx0, &dk.matmul_t(&params.wk)?);
    add_into(&mut dx0, &dv.matmul_t(&params.wv)?);

    for (i, &id) in c.ids.iter().enumerate() {
        for (e, g) in grads.emb.row_mut(id).iter_mut().zip(dx0.row(i)) {
            *e += g;
        }
        for (p, g) in grads.pos.row_mut(i).iter_mut().zip(dx0.row(i)) {
            *p += g;
        }
    }
    Ok(())
}
