//! Empirical gradient variance of an estimator at a frozen model state.
//!
//! "Total variance" is the trace of the gradient covariance: the sum of the
//! per-parameter variances.
//!
//! The decomposition follows the law of total variance conditioned on the
//! hard sample `D`:
//!
//! ```text
//! V[grad] = E[V[grad | D]] + V[E[grad | D]]
//!              term (a)        term (b)
//! ```
//!
//! estimated by nested Monte Carlo (outer draws of `D`, inner draws of the
//! surrogate noise given `D`).

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::estimators::{
    build_surrogate, sample_noise, sample_noise_given, EstimatorConfig, EstimatorError, EstimatorKind, EstimatorNoise,
    SurrogateOutput,
};
use crate::par::{self, Exec};
use crate::samplers::RngStream;
use crate::stats::Moments;
use crate::tensor::Tensor;

pub const MIN_RESAMPLES: usize = 100;
pub const MIN_NESTED: usize = 50;
const CHUNKS: usize = 20;

#[derive(Debug, Error)]
pub enum VarianceError {
    #[error("need at least {min} resamples, got {got}")]
    TooFewResamples { min: usize, got: usize },
    #[error("non-finite gradient at resample {0}")]
    NonFinite(usize),
    #[error("variance decomposition supports STGS, GR_MCK and GST, not {0}")]
    UnsupportedKind(&'static str),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("{0}")]
    Probe(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<crate::autodiff::AutodiffError> for VarianceError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        VarianceError::Estimator(e.into())
    }
}

/// A model snapshot plus loss whose gradient can be evaluated for any frozen
/// estimator noise.
pub trait GradientProbe: Sync {
    fn param_count(&self) -> usize;
    /// Detached logits the estimator samples from (`rows x n`).
    fn logits0(&self) -> Tensor;
    /// Full gradient of the loss for the given noise.
    fn gradient(&self, cfg: &EstimatorConfig, noise: &EstimatorNoise) -> Result<Vec<f64>, VarianceError>;
}

/// Linear loss `sum(w * output)` of the estimator output, differentiated with
/// respect to fixed logits.
#[derive(Debug, Clone)]
pub struct LinearLossProbe {
    pub logits: Tensor,
    pub weights: Tensor,
}

impl LinearLossProbe {
    pub fn new(logits: Tensor, weights: Tensor) -> Self {
        assert_eq!(logits.shape(), weights.shape(), "weights must match logits");
        Self { logits, weights }
    }
}

impl GradientProbe for LinearLossProbe {
    fn param_count(&self) -> usize {
        self.logits.len()
    }

    fn logits0(&self) -> Tensor {
        self.logits.clone()
    }

    fn gradient(&self, cfg: &EstimatorConfig, noise: &EstimatorNoise) -> Result<Vec<f64>, VarianceError> {
        let mut tape = Tape::new();
        let x = tape.param(self.logits.clone());
        let out = build_surrogate(&mut tape, x, noise, cfg)?;
        let w = tape.constant(self.weights.clone());
        let loss = weighted_loss(&mut tape, &out, w, cfg)?;
        tape.backward(loss)?;
        Ok(tape
            .grad(x)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; self.logits.len()]))
    }
}

/// `sum(w * output)`, plus the score-function term for REINFORCE.
pub(crate) fn weighted_loss(
    tape: &mut Tape,
    out: &SurrogateOutput,
    w: Var,
    cfg: &EstimatorConfig,
) -> Result<Var, VarianceError> {
    let prod = tape.mul(out.output, w)?;
    if cfg.kind != EstimatorKind::Reinforce {
        return Ok(tape.sum(prod)?);
    }
    let per_row = match tape.shape(prod).len() {
        2 => tape.row_sum(prod)?,
        _ => {
            let s = tape.sum(prod)?;
            tape.reshape(s, &[1, 1])?
        }
    };
    let value = tape.stop_grad(per_row)?;
    let logp = out.log_prob.expect("REINFORCE output carries log_prob");
    let score = tape.mul(value, logp)?;
    let surrogate = tape.add(per_row, score)?;
    Ok(tape.sum(surrogate)?)
}

/// Raw gradient draws, one row per resample.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBatch {
    pub samples: Tensor,
    pub estimator_id: String,
    pub seed: u64,
}

impl GradientBatch {
    pub fn resamples(&self) -> usize {
        self.samples.rows_cols().0
    }

    pub fn per_parameter(&self) -> Vec<Moments> {
        let (rows, cols) = self.samples.rows_cols();
        let mut m = vec![Moments::default(); cols];
        for r in 0..rows {
            for (acc, &x) in m.iter_mut().zip(self.samples.row(r)) {
                acc.push(x);
            }
        }
        m
    }

    pub fn mean(&self) -> Vec<f64> {
        self.per_parameter().iter().map(|m| m.mean).collect()
    }

    pub fn per_parameter_variance(&self) -> Vec<f64> {
        self.per_parameter().iter().map(|m| m.variance()).collect()
    }

    pub fn total_variance(&self) -> f64 {
        self.per_parameter_variance().iter().sum()
    }

    /// Standard error of [`GradientBatch::total_variance`] from the spread of
    /// the squared deviations `|g_r - mean|^2`.
    pub fn total_variance_stderr(&self) -> f64 {
        let mean = self.mean();
        let (rows, _) = self.samples.rows_cols();
        let q: Moments = (0..rows)
            .map(|r| {
                self.samples
                    .row(r)
                    .iter()
                    .zip(&mean)
                    .map(|(x, m)| (x - m).powi(2))
                    .sum::<f64>()
                    * rows as f64
                    / (rows as f64 - 1.0)
            })
            .collect();
        q.std_error()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceReport {
    pub estimator: String,
    pub tau: f64,
    pub gap: Option<f64>,
    pub mc_samples: usize,
    pub per_parameter_variance: Vec<f64>,
    pub total_variance: f64,
    pub total_variance_stderr: f64,
    pub term_a: Option<f64>,
    pub term_a_stderr: Option<f64>,
    pub term_b: Option<f64>,
    pub term_b_stderr: Option<f64>,
    pub n_outer: usize,
    pub n_inner: usize,
    pub seed: u64,
}

impl VarianceReport {
    fn base(cfg: &EstimatorConfig, seed: u64) -> Self {
        Self {
            estimator: cfg.label(),
            tau: cfg.tau,
            gap: match cfg.kind {
                EstimatorKind::Gst | EstimatorKind::NzGst => cfg.gap_value(),
                _ => None,
            },
            mc_samples: cfg.mc_samples,
            per_parameter_variance: vec![],
            total_variance: 0.0,
            total_variance_stderr: 0.0,
            term_a: None,
            term_a_stderr: None,
            term_b: None,
            term_b_stderr: None,
            n_outer: 0,
            n_inner: 0,
            seed,
        }
    }

    pub fn csv_row(&self) -> VarianceCsvRow {
        VarianceCsvRow {
            estimator: self.estimator.clone(),
            tau: self.tau,
            gap: self.gap,
            k: self.mc_samples,
            total_variance: self.total_variance,
            term_a: self.term_a,
            term_b: self.term_b,
            n_resamples: self.n_outer * self.n_inner.max(1),
            seed: self.seed,
        }
    }
}

/// One line of the variance CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceCsvRow {
    pub estimator: String,
    pub tau: f64,
    pub gap: Option<f64>,
    #[serde(rename = "K")]
    pub k: usize,
    pub total_variance: f64,
    pub term_a: Option<f64>,
    pub term_b: Option<f64>,
    pub n_resamples: usize,
    pub seed: u64,
}

pub fn write_variance_csv(path: &Path, reports: &[VarianceReport]) -> Result<(), VarianceError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

fn finite_or(r: usize, g: Vec<f64>) -> Result<Vec<f64>, VarianceError> {
    if g.iter().all(|x| x.is_finite()) {
        Ok(g)
    } else {
        Err(VarianceError::NonFinite(r))
    }
}

/// Collects `resamples` full gradients (kept in memory; use for small
/// parameter counts).
pub fn collect_gradients(
    probe: &dyn GradientProbe,
    cfg: &EstimatorConfig,
    resamples: usize,
    rng: &mut RngStream,
) -> Result<GradientBatch, VarianceError> {
    let seed = rng.seed();
    let base = rng.split();
    let logits0 = probe.logits0();
    let rows = par::try_map_range(Exec::default(), resamples, |r| {
        let mut rr = base.fork(r as u64);
        let noise = sample_noise(&logits0, cfg, &mut rr)?;
        finite_or(r, probe.gradient(cfg, &noise)?)
    })?;
    let p = probe.param_count();
    Ok(GradientBatch {
        samples: Tensor::new(&[resamples, p], rows.concat()).map_err(EstimatorError::from)?,
        estimator_id: cfg.label(),
        seed,
    })
}

pub fn gradient_variance(
    probe: &dyn GradientProbe,
    cfg: &EstimatorConfig,
    resamples: usize,
    rng: &mut RngStream,
) -> Result<VarianceReport, VarianceError> {
    gradient_variance_with(Exec::default(), probe, cfg, resamples, rng)
}

/// Streaming variance over `resamples` independent estimator draws. The
/// resamples are processed in fixed chunks (parallel when `exec` allows);
/// the chunk-to-chunk spread of the trace gives the standard error.
pub fn gradient_variance_with(
    exec: Exec,
    probe: &dyn GradientProbe,
    cfg: &EstimatorConfig,
    resamples: usize,
    rng: &mut RngStream,
) -> Result<VarianceReport, VarianceError> {
    if resamples < MIN_RESAMPLES {
        return Err(VarianceError::TooFewResamples {
            min: MIN_RESAMPLES,
            got: resamples,
        });
    }
    let seed = rng.seed();
    let base = rng.split();
    let logits0 = probe.logits0();
    let p = probe.param_count();
    let sizes = par::chunk_sizes(resamples, CHUNKS);
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, &s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();
    let run_chunk = |c: usize| -> Result<Vec<Moments>, VarianceError> {
        let mut m = vec![Moments::default(); p];
        for r in offsets[c]..offsets[c] + sizes[c] {
            let mut rr = base.fork(r as u64);
            let noise = sample_noise(&logits0, cfg, &mut rr)?;
            let g = finite_or(r, probe.gradient(cfg, &noise)?)?;
            for (acc, x) in m.iter_mut().zip(g) {
                acc.push(x);
            }
        }
        Ok(m)
    };
    // Only `width` chunks are alive at a time; each is folded into the
    // running total in chunk order.
    let width = par::width(exec).max(1);
    let mut merged = vec![Moments::default(); p];
    let mut chunk_traces = Moments::default();
    for group in (0..sizes.len()).collect::<Vec<_>>().chunks(width) {
        let done = par::try_map_range(exec, group.len(), |j| run_chunk(group[j]))?;
        for m in done {
            chunk_traces.push(m.iter().map(Moments::variance).sum());
            for (acc, x) in merged.iter_mut().zip(m) {
                *acc = acc.merge(x);
            }
        }
    }
    let per_parameter_variance: Vec<f64> = merged.iter().map(Moments::variance).collect();
    let mut report = VarianceReport::base(cfg, seed);
    report.total_variance = per_parameter_variance.iter().sum();
    report.total_variance_stderr = chunk_traces.std_error();
    report.per_parameter_variance = per_parameter_variance;
    report.n_outer = resamples;
    report.n_inner = 1;
    Ok(report)
}

/// Nested Monte-Carlo estimate of terms (a) and (b). Term (b) is corrected
/// for the `term_a / n_inner` bias of the outer variance of inner means.
pub fn variance_decomposition(
    probe: &dyn GradientProbe,
    cfg: &EstimatorConfig,
    n_outer: usize,
    n_inner: usize,
    rng: &mut RngStream,
) -> Result<VarianceReport, VarianceError> {
    if !matches!(
        cfg.kind,
        EstimatorKind::Stgs | EstimatorKind::GrMck | EstimatorKind::Gst
    ) {
        return Err(VarianceError::UnsupportedKind(cfg.kind.as_str()));
    }
    if n_outer < MIN_NESTED || n_inner < MIN_NESTED {
        return Err(VarianceError::TooFewResamples {
            min: MIN_NESTED,
            got: n_outer.min(n_inner),
        });
    }
    let seed = rng.seed();
    let base = rng.split();
    let logits0 = probe.logits0();
    let p = probe.param_count();

    // Per outer draw: inner variance trace and inner mean vector.
    let outer = par::try_map_range(
        Exec::default(),
        n_outer,
        |o| -> Result<(f64, Vec<f64>), VarianceError> {
            let orng = base.fork(o as u64);
            let mut drng = orng.fork(u64::MAX);
            let drawn = sample_noise(&logits0, cfg, &mut drng)?;
            let mut m = vec![Moments::default(); p];
            for k in 0..n_inner {
                let mut irng = orng.fork(k as u64);
                let noise = sample_noise_given(&logits0, &drawn.samples, cfg, &mut irng)?;
                let g = finite_or(o * n_inner + k, probe.gradient(cfg, &noise)?)?;
                for (acc, x) in m.iter_mut().zip(g) {
                    acc.push(x);
                }
            }
            let trace = m.iter().map(Moments::variance).sum();
            Ok((trace, m.iter().map(|x| x.mean).collect()))
        },
    )?;

    let inner_traces: Moments = outer.iter().map(|(t, _)| *t).collect();
    let term_a = inner_traces.mean;

    let mut mean_of_means = vec![0.0; p];
    for (_, mu) in &outer {
        for (acc, x) in mean_of_means.iter_mut().zip(mu) {
            *acc += x / n_outer as f64;
        }
    }
    let q_rows: Vec<f64> = outer
        .iter()
        .map(|(_, mu)| {
            mu.iter().zip(&mean_of_means).map(|(x, m)| (x - m).powi(2)).sum::<f64>() * n_outer as f64
                / (n_outer as f64 - 1.0)
        })
        .collect();
    let q: Moments = q_rows.iter().copied().collect();
    let term_b = q.mean - term_a / n_inner as f64;
    // term_a and term_b share the outer draws; the sum is a per-draw mean.
    let shrink = 1.0 - 1.0 / n_inner as f64;
    let sum_rows: Moments = outer.iter().zip(&q_rows).map(|((t, _), q)| t * shrink + q).collect();

    let mut report = VarianceReport::base(cfg, seed);
    report.term_a = Some(term_a);
    report.term_a_stderr = Some(inner_traces.std_error());
    report.term_b = Some(term_b);
    report.term_b_stderr = Some((q.std_error().powi(2) + (inner_traces.std_error() / n_inner as f64).powi(2)).sqrt());
    report.total_variance = term_a + term_b;
    report.total_variance_stderr = sum_rows.std_error();
    report.n_outer = n_outer;
    report.n_inner = n_inner;
    Ok(report)
}

/// Mean Shannon entropy (nats) of the rows of a probability tensor, with
/// `0 log 0 = 0`.
pub fn entropy_rows(probs: &Tensor) -> f64 {
    let (rows, _) = probs.rows_cols();
    let total: f64 = (0..rows)
        .map(|r| {
            probs
                .row(r)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>()
        })
        .sum();
    total / rows as f64
}

/// Mean entropy of an estimator's surrogate rows.
pub fn surrogate_entropy(tape: &Tape, out: &SurrogateOutput) -> f64 {
    entropy_rows(tape.value(out.surrogate_probs))
}
