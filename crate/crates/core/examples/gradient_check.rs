//! Analytic gradients against central differences on a small batch.
use syntrace::losses::{Bandwidth, KernelConfig, LossWeights};
use syntrace::model::{encode, forward_backward, init, Batch, BenignItem, LossSpec, ModelConfig, PARAM_NAMES};

fn main() -> syntrace::Result<()> {
    let cfg = ModelConfig { vocab_size: 12, d: 6, h: 5, max_len: 8, map_dim: 3, ..ModelConfig::default() };
    let (mut p, bank) = init(&cfg, None)?;
    let teacher = p.clone();
    let item = |ids: Vec<usize>| -> syntrace::Result<BenignItem> {
        Ok(BenignItem { teacher: encode(&teacher, &ids)?.per_token, ids })
    };
    let batch = Batch {
        benign: vec![item(vec![1, 2, 3, 4])?, item(vec![5, 6, 7])?],
        backdoor: vec![vec![8, 9, 10, 11, 1], vec![2, 9, 4, 11]],
        target: encode(&teacher, &[3, 5, 7])?.per_token,
    };
    // nudge the student off the teacher so every term has a gradient
    p.w1.as_mut_slice()[0] += 0.3;
    let spec = LossSpec {
        benign_weight: 1.0,
        weights: LossWeights { gamma: 1.0, lambda: 0.01 },
        kernel: KernelConfig { sigma: Bandwidth::Fixed(1.0), ..KernelConfig::default() },
    };
    let g = forward_backward(&p, &bank, &batch, &spec)?.grads;
    let h = 1e-5;
    for (name, (_, gm)) in PARAM_NAMES.iter().zip(g.tensors()) {
        let mut worst: f64 = 0.0;
        for i in 0..gm.as_slice().len().min(20) {
            let mut q = p.clone();
            let f = |q: &syntrace::model::EncoderParams| forward_backward(q, &bank, &batch, &spec).map(|o| o.losses.total);
            let t = q.tensors_mut().into_iter().find(|(n, _)| n == name).unwrap().1;
            t.as_mut_slice()[i] += h;
            let up = f(&q)?;
            let t = q.tensors_mut().into_iter().find(|(n, _)| n == name).unwrap().1;
            t.as_mut_slice()[i] -= 2.0 * h;
            let down = f(&q)?;
            let fd = (up - down) / (2.0 * h);
            let a = gm.as_slice()[i];
            worst = worst.max((a - fd).abs() / (a.abs() + fd.abs()).max(1e-8));
        }
        println!("{name:<4} max relative error {worst:.2e}");
    }
    Ok(())
}
