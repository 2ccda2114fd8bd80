//! Helpers shared by the integration and acceptance targets.
#![allow(dead_code)]

use gapped_st::autodiff::Tape;
use gapped_st::estimators::{build_surrogate, sample_noise, EstimatorConfig, EstimatorKind, EstimatorNoise, Mode};
use gapped_st::samplers::RngStream;
use gapped_st::tensor::{log_sum_exp, Tensor};
use gapped_st::variance::{GradientProbe, LinearLossProbe};
use rand::Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn uniform_row(n: usize, lo: f64, hi: f64, rng: &mut RngStream) -> Tensor {
    Tensor::matrix(1, n, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Forward value of the loss whose gradient the hard-mode estimator
/// reports, with `noise` held fixed: `<w, h(x)>` for the straight-through
/// family, `w[D] * log p_x(D)` for REINFORCE.
pub fn frozen_objective(cfg: &EstimatorConfig, x: &Tensor, w: &Tensor, noise: &EstimatorNoise) -> f64 {
    if cfg.kind == EstimatorKind::Reinforce {
        let (rows, _) = x.rows_cols();
        return (0..rows)
            .map(|r| {
                let d = noise.samples[r].index;
                w.row(r)[d] * (x.row(r)[d] - log_sum_exp(x.row(r)))
            })
            .sum();
    }
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let soft = cfg.with_mode(Mode::Soft);
    let out = build_surrogate(&mut tape, v, noise, &soft).unwrap();
    tape.value(out.output).dot(w).unwrap()
}

/// Relative max-norm error between the hard-mode backward pass of `<w, out>`
/// and central finite differences of [`frozen_objective`], for one draw.
pub fn frozen_fd_error(cfg: &EstimatorConfig, logits: &Tensor, w: &Tensor, rng: &mut RngStream) -> f64 {
    let noise = sample_noise(logits, cfg, rng).unwrap();
    let probe = LinearLossProbe::new(logits.clone(), w.clone());
    let analytic = probe.gradient(cfg, &noise).unwrap();
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        let mut xp = logits.clone();
        xp.data_mut()[k] += FD_STEP;
        let mut xm = logits.clone();
        xm.data_mut()[k] -= FD_STEP;
        let fd = (frozen_objective(cfg, &xp, w, &noise) - frozen_objective(cfg, &xm, w, &noise)) / (2.0 * FD_STEP);
        worst = worst.max((a - fd).abs());
        scale = scale.max(fd.abs());
    }
    worst / scale.max(1e-12)
}

/// Every estimator family at one temperature.
pub fn all_estimators(tau: f64) -> Vec<EstimatorConfig> {
    use gapped_st::estimators::Gap;
    vec![
        EstimatorConfig::reinforce(),
        EstimatorConfig::st_naive(tau),
        EstimatorConfig::stgs(tau),
        EstimatorConfig::gr_mck(1, tau),
        EstimatorConfig::gr_mck(10, tau),
        EstimatorConfig::gst(Gap::Const(0.0), tau),
        EstimatorConfig::gst(Gap::Const(1.0), tau),
        EstimatorConfig::gst(Gap::Pi, tau),
        EstimatorConfig::nz_gst(Gap::Const(0.0), tau),
        EstimatorConfig::nz_gst(Gap::Const(1.0), tau),
    ]
}
