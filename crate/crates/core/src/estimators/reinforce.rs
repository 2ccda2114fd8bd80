use crate::samplers::{gumbel_max, LogitVector, RngStream};
use crate::tensor::Tensor;
use crate::variance::GradientBatch;

use super::Result;

/// Score-function gradient samples with respect to the logits:
/// `g(D) * d log p(D) / d logits = g(D) * (D - p)`, one row per draw.
pub fn reinforce_grad(
    logits: &LogitVector,
    loss_per_category: impl Fn(usize) -> f64,
    rng: &mut RngStream,
    n_samples: usize,
) -> Result<GradientBatch> {
    let p = logits.probs();
    let n = logits.len();
    let mut data = Vec::with_capacity(n_samples * n);
    for _ in 0..n_samples {
        let (d, _) = gumbel_max(logits, rng);
        let g = loss_per_category(d.index);
        data.extend(d.onehot.iter().zip(&p).map(|(di, pi)| g * (di - pi)));
    }
    Ok(GradientBatch {
        samples: Tensor::new(&[n_samples, n], data)?,
        estimator_id: "REINFORCE".into(),
        seed: rng.seed(),
    })
}
