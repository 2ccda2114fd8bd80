//! Expected gap between the top-2 Gumbel-perturbed logits, conditioned on
//! which category won.
//!
//! Closed form: `Gap(i) = -log(1 - p_i) / p_i` with `p = Softmax_1(l)`.
//! Equivalently, with `s` the log-sum-exp of the other logits and
//! `d = s - l_i`, the gap is `E[X - d | X >= d]` for `X ~ Logistic(0, 1)`,
//! i.e. `log(1 + e^{-d}) / (1 - 1 / (1 + e^{-d}))`.

use serde::Serialize;
use thiserror::Error;

use crate::par::{self, Exec};
use crate::samplers::{conditional_perturbed_logits, gumbel_max, LogitVector, OneHotSample, RngStream, SamplerError};
use crate::stats::{ks_one_sample, Moments};

/// Below this selected probability the closed form returns its limit, 1.
pub const SMALL_P: f64 = 1e-12;
pub const MIN_MC_DRAWS: usize = 1000;
pub const MIN_ACCEPTED: u64 = 100;
const MC_CHUNKS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GapError {
    #[error("gap is undefined for a single category")]
    SingleCategory,
    #[error("category index {index} out of range for {n} categories")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("selected probability is numerically 1; gap diverges")]
    Saturated,
    #[error("at least {MIN_MC_DRAWS} Monte-Carlo draws required, got {0}")]
    TooFewDraws(usize),
    #[error("only {accepted} of {drawn} rejection draws selected the category (need {MIN_ACCEPTED})")]
    TooFewAccepted { accepted: u64, drawn: usize },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

fn check(logits: &LogitVector, i: usize) -> Result<(), GapError> {
    if logits.len() < 2 {
        return Err(GapError::SingleCategory);
    }
    if i >= logits.len() {
        return Err(GapError::IndexOutOfRange {
            index: i,
            n: logits.len(),
        });
    }
    Ok(())
}

/// `-log(1 - p_i) / p_i`. For `p_i > 1/2`, `log(1 - p_i)` is taken as the
/// log-mass of the unselected categories, which stays accurate as `p_i -> 1`.
pub fn gap_closed_form(logits: &LogitVector, i: usize) -> Result<f64, GapError> {
    check(logits, i)?;
    let log_z = logits.log_partition();
    let p = (logits.values()[i] - log_z).exp();
    if p < SMALL_P {
        return Ok(1.0);
    }
    if p >= 1.0 {
        return Err(GapError::Saturated);
    }
    let neg_log_rest = if p > 0.5 {
        log_z - logits.log_sum_exp_excluding(i)
    } else {
        -(-p).ln_1p()
    };
    Ok(neg_log_rest / p)
}

/// Same quantity through the logistic route, parameterised by the logit
/// difference `l_i - s`.
pub fn gap_logistic_form(logits: &LogitVector, i: usize) -> Result<f64, GapError> {
    check(logits, i)?;
    let s = logits.log_sum_exp_excluding(i);
    gap_from_logit_difference(logits.values()[i] - s)
}

/// `log(1 + e^x) / (1 - 1 / (1 + e^x))` for `x = l_i - s`.
pub fn gap_from_logit_difference(x: f64) -> Result<f64, GapError> {
    let softplus = x.max(0.0) + (-x.abs()).exp().ln_1p();
    let sigmoid = crate::autodiff::sigmoid(x);
    if sigmoid == 0.0 {
        return Ok(1.0);
    }
    if sigmoid >= 1.0 {
        return Err(GapError::Saturated);
    }
    Ok(softplus / sigmoid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum McPath {
    /// Draw from the conditional distribution directly.
    #[default]
    Conditional,
    /// Draw unconditionally and keep draws where `i` wins.
    Rejection,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub analytic_gap: f64,
    pub mc_gap: f64,
    pub mc_stderr: f64,
    /// Draws contributing to `mc_gap` (accepted draws on the rejection path).
    pub n_samples: u64,
    pub conditioning_index: usize,
    pub logits: Vec<f64>,
}

impl GapReport {
    /// `|mc - analytic|` in standard errors.
    pub fn z_score(&self) -> f64 {
        (self.mc_gap - self.analytic_gap).abs() / self.mc_stderr
    }
}

fn top_gap(values: &[f64], i: usize) -> f64 {
    let runner_up = values
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    values[i] - runner_up
}

pub fn gap_monte_carlo(
    logits: &LogitVector,
    i: usize,
    rng: &mut RngStream,
    n: usize,
    path: McPath,
) -> Result<GapReport, GapError> {
    gap_monte_carlo_with(Exec::default(), logits, i, rng, n, path)
}

/// [`gap_monte_carlo`] with an explicit execution mode. Draws are split into
/// fixed chunks with their own sub-streams, so the result does not depend on
/// `exec`.
pub fn gap_monte_carlo_with(
    exec: Exec,
    logits: &LogitVector,
    i: usize,
    rng: &mut RngStream,
    n: usize,
    path: McPath,
) -> Result<GapReport, GapError> {
    check(logits, i)?;
    if n < MIN_MC_DRAWS {
        return Err(GapError::TooFewDraws(n));
    }
    let analytic_gap = gap_closed_form(logits, i)?;
    let base = rng.split();
    let sizes = par::chunk_sizes(n, MC_CHUNKS);
    let given = OneHotSample::new(i, logits.len());
    let parts = par::try_map_range(exec, sizes.len(), |c| -> Result<Moments, GapError> {
        let mut r = base.fork(c as u64);
        let mut m = Moments::default();
        for _ in 0..sizes[c] {
            match path {
                McPath::Conditional => {
                    let p = conditional_perturbed_logits(logits, &given, &mut r)?;
                    m.push(top_gap(&p.values, i));
                }
                McPath::Rejection => {
                    let (d, p) = gumbel_max(logits, &mut r);
                    if d.index == i {
                        m.push(top_gap(&p.values, i));
                    }
                }
            }
        }
        Ok(m)
    })?;
    let moments = parts.into_iter().fold(Moments::default(), Moments::merge);
    if moments.n < MIN_ACCEPTED {
        return Err(GapError::TooFewAccepted {
            accepted: moments.n,
            drawn: n,
        });
    }
    Ok(GapReport {
        analytic_gap,
        mc_gap: moments.mean,
        mc_stderr: moments.std_error(),
        n_samples: moments.n,
        conditioning_index: i,
        logits: logits.values().to_vec(),
    })
}

/// KS p-value of `G_1 - G_0` (independent Gumbels) against Logistic(0, 1).
pub fn logistic_difference_p_value(rng: &mut RngStream, n: usize) -> f64 {
    let xs: Vec<f64> = (0..n).map(|_| rng.gumbel() - rng.gumbel()).collect();
    ks_one_sample(&xs, crate::autodiff::sigmoid).1
}
