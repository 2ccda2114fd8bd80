//! Zero-gradient logit perturbations of the gapped estimator.

use crate::samplers::OneHotSample;
use crate::tensor::softmax;

/// Clamp applied to the selected probability before evaluating the
/// expected-gap formula, which diverges as `p -> 1`.
pub const PI_GAP_CLAMP: f64 = 1e-6;

fn row_max(logits0: &[f64]) -> f64 {
    logits0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `m1 = (max_j l_j - <l, D>) * D`: lifts the selected logit to the maximum.
pub fn compute_m1(logits0: &[f64], d: &OneHotSample) -> Vec<f64> {
    let mx = row_max(logits0);
    let sel: f64 = logits0.iter().zip(&d.onehot).map(|(l, d)| l * d).sum();
    d.onehot.iter().map(|&di| (mx - sel) * di).collect()
}

/// `m2 = (l + g - max_j l_j)+ * (1 - D)`: lowers every unselected logit to
/// at most `max - g`.
pub fn compute_m2(logits0: &[f64], d: &OneHotSample, g: f64) -> Vec<f64> {
    let mx = row_max(logits0);
    logits0
        .iter()
        .zip(&d.onehot)
        .map(|(&l, &di)| ((l + g) - mx).max(0.0) * (1.0 - di))
        .collect()
}

/// Per-sample gap `-log(1 - p_i) / p_i` with `p_i` clamped to
/// `[1e-6, 1 - 1e-6]`.
pub fn pi_gap(logits0: &[f64], index: usize) -> f64 {
    let p = softmax(logits0, 1.0)[index].clamp(PI_GAP_CLAMP, 1.0 - PI_GAP_CLAMP);
    -(-p).ln_1p() / p
}
