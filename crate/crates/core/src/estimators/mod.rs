//! Straight-through family of gradient estimators for categorical samples.
//!
//! Every estimator is split into two stages:
//!
//! 1. [`sample_noise`] draws the hard sample `D ~ Softmax_1(logits0)` for
//!    each row plus whatever randomness the surrogate needs, all computed
//!    from the detached logits.
//! 2. [`build_surrogate`] wires the surrogate `h(logits, noise)` onto the
//!    tape and, in hard mode, combines it with `D` as
//!    `D - stop_grad(h) + h`.
//!
//! Keeping the stages apart lets callers freeze the noise (finite-difference
//! checks, conditional-variance profiling) while still running the exact code
//! path used in training.

mod config;
mod perturb;
mod reinforce;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::samplers::{conditional_perturbed_logits, gumbel_max, LogitVector, OneHotSample, RngStream, SamplerError};
use crate::tensor::{Tensor, TensorError};

pub use config::{EstimatorConfig, EstimatorKind, Gap, Mode};
pub use perturb::{compute_m1, compute_m2, pi_gap};
pub use reinforce::reinforce_grad;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("invalid estimator config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

impl From<TensorError> for EstimatorError {
    fn from(e: TensorError) -> Self {
        EstimatorError::Autodiff(e.into())
    }
}

pub type Result<T> = std::result::Result<T, EstimatorError>;

/// Surrogate-specific randomness, already reduced to what the surrogate
/// consumes. All tensors have the logits' `rows x n` layout.
#[derive(Debug, Clone, PartialEq)]
pub enum Noise {
    /// ST and REINFORCE: the surrogate does not depend on the noise.
    None,
    /// STGS: `G` such that `logits0 + G` is the perturbed vector whose argmax
    /// is `D`.
    Gumbel(Tensor),
    /// GR-MCK: `K` conditional perturbations `J_k - logits0`.
    Conditional(Vec<Tensor>),
    /// GST: the zero-gradient perturbation `m1 - m2`.
    Perturbation(Tensor),
    /// NZ-GST: per-row gap sizes; the perturbation is rebuilt on the tape.
    Gaps(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorNoise {
    pub samples: Vec<OneHotSample>,
    pub noise: Noise,
}

impl EstimatorNoise {
    pub fn indices(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.index).collect()
    }

    /// Stacked one-hot rows.
    pub fn onehots(&self, shape: &[usize]) -> Tensor {
        let data = self.samples.iter().flat_map(|s| s.onehot.iter().copied()).collect();
        Tensor::new(shape, data).expect("one row per sample")
    }
}

#[derive(Debug, Clone)]
pub struct SurrogateOutput {
    pub samples: Vec<OneHotSample>,
    /// Hard mode: exactly the one-hot rows in the forward pass. Soft mode:
    /// the surrogate itself.
    pub output: Var,
    /// The surrogate `h` (rows in the probability simplex).
    pub surrogate_probs: Var,
    /// REINFORCE only: `log p(D)` per row, `rows x 1`.
    pub log_prob: Option<Var>,
}

fn row_logits(t: &Tensor, r: usize) -> Result<LogitVector> {
    Ok(LogitVector::new(t.row(r).to_vec())?)
}

/// Draws the hard sample and the surrogate randomness for every row of
/// `logits0`. Row `r` uses sub-stream `r` of a stream split off `rng`, so
/// the batch size never changes a row's draws.
pub fn sample_noise(logits0: &Tensor, cfg: &EstimatorConfig, rng: &mut RngStream) -> Result<EstimatorNoise> {
    cfg.validate()?;
    let (rows, _) = logits0.rows_cols();
    let base = rng.split();
    let mut samples = Vec::with_capacity(rows);
    let mut gumbels = Vec::new();
    let mut row_streams = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut row_rng = base.fork(r as u64);
        let l = row_logits(logits0, r)?;
        let (d, perturbed) = gumbel_max(&l, &mut row_rng);
        if cfg.kind == EstimatorKind::Stgs {
            gumbels.extend(perturbed.values.iter().zip(l.values()).map(|(p, l)| p - l));
        }
        samples.push(d);
        row_streams.push(row_rng);
    }
    if cfg.kind == EstimatorKind::Stgs {
        return Ok(EstimatorNoise {
            samples,
            noise: Noise::Gumbel(Tensor::new(logits0.shape(), gumbels)?),
        });
    }
    let noise = conditional_noise(logits0, &samples, cfg, &mut row_streams)?;
    Ok(EstimatorNoise { samples, noise })
}

/// Surrogate randomness given already-drawn categories. For STGS this is the
/// conditional construction: `logits0 + G | D` via the exponential
/// representation, which is distributionally identical to the Gumbel path.
pub fn sample_noise_given(
    logits0: &Tensor,
    samples: &[OneHotSample],
    cfg: &EstimatorConfig,
    rng: &mut RngStream,
) -> Result<EstimatorNoise> {
    cfg.validate()?;
    let (rows, _) = logits0.rows_cols();
    if samples.len() != rows {
        return Err(EstimatorError::Config(format!(
            "{} samples for {rows} logit rows",
            samples.len()
        )));
    }
    let base = rng.split();
    let mut streams: Vec<RngStream> = (0..rows).map(|r| base.fork(r as u64)).collect();
    let noise = match cfg.kind {
        EstimatorKind::Stgs => {
            let cfg1 = EstimatorConfig { mc_samples: 1, ..*cfg };
            match conditional_draws(logits0, samples, &cfg1, &mut streams)? {
                mut v if v.len() == 1 => Noise::Gumbel(v.remove(0)),
                _ => unreachable!("one conditional draw requested"),
            }
        }
        _ => conditional_noise(logits0, samples, cfg, &mut streams)?,
    };
    Ok(EstimatorNoise {
        samples: samples.to_vec(),
        noise,
    })
}

fn conditional_draws(
    logits0: &Tensor,
    samples: &[OneHotSample],
    cfg: &EstimatorConfig,
    streams: &mut [RngStream],
) -> Result<Vec<Tensor>> {
    let (rows, cols) = logits0.rows_cols();
    let k = cfg.mc_samples;
    let mut draws = vec![vec![0.0; rows * cols]; k];
    for r in 0..rows {
        let l = row_logits(logits0, r)?;
        for draw in draws.iter_mut() {
            let j = conditional_perturbed_logits(&l, &samples[r], &mut streams[r])?;
            for (c, (v, l0)) in j.values.iter().zip(l.values()).enumerate() {
                draw[r * cols + c] = v - l0;
            }
        }
    }
    draws
        .into_iter()
        .map(|d| Tensor::new(logits0.shape(), d).map_err(Into::into))
        .collect()
}

fn conditional_noise(
    logits0: &Tensor,
    samples: &[OneHotSample],
    cfg: &EstimatorConfig,
    streams: &mut [RngStream],
) -> Result<Noise> {
    let (rows, _) = logits0.rows_cols();
    Ok(match cfg.kind {
        EstimatorKind::Reinforce | EstimatorKind::StNaive => Noise::None,
        EstimatorKind::Stgs | EstimatorKind::GrMck => {
            Noise::Conditional(conditional_draws(logits0, samples, cfg, streams)?)
        }
        EstimatorKind::Gst => {
            let mut m = Vec::with_capacity(logits0.len());
            for (r, d) in samples.iter().enumerate().take(rows) {
                let l = logits0.row(r);
                let g = row_gap(cfg.gap, l, d);
                let m1 = compute_m1(l, d);
                let m2 = compute_m2(l, d, g);
                m.extend(m1.iter().zip(&m2).map(|(a, b)| a - b));
            }
            Noise::Perturbation(Tensor::new(logits0.shape(), m)?)
        }
        EstimatorKind::NzGst => Noise::Gaps(
            samples
                .iter()
                .enumerate()
                .map(|(r, d)| row_gap(cfg.gap, logits0.row(r), d))
                .collect(),
        ),
    })
}

fn row_gap(gap: Gap, logits0: &[f64], d: &OneHotSample) -> f64 {
    match gap {
        Gap::Const(g) => g,
        Gap::Pi => pi_gap(logits0, d.index),
    }
}

/// Builds the estimator output for `logits` on `tape` from frozen `noise`.
pub fn build_surrogate(
    tape: &mut Tape,
    logits: Var,
    noise: &EstimatorNoise,
    cfg: &EstimatorConfig,
) -> Result<SurrogateOutput> {
    cfg.validate()?;
    let shape = tape.shape(logits).to_vec();
    let (rows, cols) = tape.value(logits).rows_cols();
    if noise.samples.len() != rows || noise.samples.iter().any(|s| s.len() != cols) {
        return Err(EstimatorError::Config("noise does not match logits layout".into()));
    }
    let hard = noise.onehots(&shape);
    let tau = cfg.tau;

    let mut log_prob = None;
    let h = match (&noise.noise, cfg.kind) {
        (Noise::None, EstimatorKind::StNaive) => tape.softmax_tau(logits, 1.0)?,
        (Noise::None, EstimatorKind::Reinforce) => {
            let two_d = as_matrix(tape, logits)?;
            let logp = tape.log_softmax(two_d)?;
            let dmask = tape.constant(noise.onehots(tape.shape(logp)));
            let picked = tape.mul(logp, dmask)?;
            log_prob = Some(tape.row_sum(picked)?);
            tape.softmax_tau(logits, 1.0)?
        }
        (Noise::Gumbel(g), EstimatorKind::Stgs) => {
            let g = tape.constant(g.clone());
            let z = tape.add(logits, g)?;
            tape.softmax_tau(z, tau)?
        }
        (Noise::Conditional(draws), EstimatorKind::GrMck | EstimatorKind::Stgs) => {
            let mut acc: Option<Var> = None;
            for d in draws {
                let n = tape.constant(d.clone());
                let z = tape.add(logits, n)?;
                let s = tape.softmax_tau(z, tau)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, s)?,
                    None => s,
                });
            }
            let sum = acc.ok_or_else(|| EstimatorError::Config("no conditional draws".into()))?;
            tape.scale(sum, 1.0 / draws.len() as f64)?
        }
        (Noise::Perturbation(m), EstimatorKind::Gst) => {
            let m = tape.constant(m.clone());
            let z = tape.add(logits, m)?;
            tape.softmax_tau(z, tau)?
        }
        (Noise::Gaps(gaps), EstimatorKind::NzGst) => {
            let z = live_gapped_logits(tape, logits, &noise.samples, gaps)?;
            tape.softmax_tau(z, tau)?
        }
        _ => {
            return Err(EstimatorError::Config(format!(
                "noise variant does not match estimator {}",
                cfg.kind.as_str()
            )))
        }
    };

    let output = match (cfg.kind, cfg.mode) {
        (EstimatorKind::Reinforce, _) => tape.constant(hard),
        (_, Mode::Hard) => straight_through_combine(tape, &hard, h)?,
        (_, Mode::Soft) => h,
    };
    Ok(SurrogateOutput {
        samples: noise.samples.clone(),
        output,
        surrogate_probs: h,
        log_prob,
    })
}

fn as_matrix(tape: &mut Tape, v: Var) -> Result<Var> {
    let (rows, cols) = tape.value(v).rows_cols();
    if tape.shape(v).len() == 2 {
        Ok(v)
    } else {
        Ok(tape.reshape(v, &[rows, cols])?)
    }
}

/// `logits + m1(logits, D) - m2(logits, D, g)` with the perturbation kept on
/// the tape, so gradient flows through the max and the clamp.
fn live_gapped_logits(tape: &mut Tape, logits: Var, samples: &[OneHotSample], gaps: &[f64]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let l = as_matrix(tape, logits)?;
    let (rows, cols) = tape.value(l).rows_cols();
    let dmat: Tensor = Tensor::new(
        &[rows, cols],
        samples.iter().flat_map(|s| s.onehot.iter().copied()).collect(),
    )?;
    let not_d = dmat.map(|x| 1.0 - x);
    let gmat = Tensor::new(
        &[rows, cols],
        gaps.iter().flat_map(|&g| std::iter::repeat_n(g, cols)).collect(),
    )?;
    let d = tape.constant(dmat);
    let not_d = tape.constant(not_d);
    let gv = tape.constant(gmat);

    let mx = tape.row_max(l)?;
    let picked = tape.mul(l, d)?;
    let sel = tape.row_sum(picked)?;
    let lift = tape.sub(mx, sel)?;
    let lift = tape.expand_cols(lift, cols)?;
    let m1 = tape.mul(lift, d)?;

    let mx_full = tape.expand_cols(mx, cols)?;
    let shifted = tape.add(l, gv)?;
    let over = tape.sub(shifted, mx_full)?;
    let over = tape.relu_plus(over)?;
    let m2 = tape.mul(over, not_d)?;

    let m = tape.sub(m1, m2)?;
    let z = tape.add(l, m)?;
    if shape.len() == 2 {
        Ok(z)
    } else {
        Ok(tape.reshape(z, &shape)?)
    }
}

/// `hard - stop_grad(h) + h`, evaluated as `(h - stop_grad(h)) + hard` so
/// the forward value is exactly `hard` (the difference is exactly zero).
pub fn straight_through_combine(tape: &mut Tape, hard: &Tensor, h: Var) -> Result<Var> {
    tape.value(h).same_shape(hard, "straight_through_combine")?;
    let frozen = tape.stop_grad(h)?;
    let zero = tape.sub(h, frozen)?;
    let d = tape.constant(hard.clone());
    Ok(tape.add(zero, d)?)
}

/// Samples and builds in one go.
pub fn estimate(tape: &mut Tape, logits: Var, cfg: &EstimatorConfig, rng: &mut RngStream) -> Result<SurrogateOutput> {
    let logits0 = tape.value(logits).clone();
    let noise = sample_noise(&logits0, cfg, rng)?;
    build_surrogate(tape, logits, &noise, cfg)
}

fn estimate_as(
    kind: EstimatorKind,
    tape: &mut Tape,
    logits: Var,
    cfg: &EstimatorConfig,
    rng: &mut RngStream,
) -> Result<SurrogateOutput> {
    estimate(tape, logits, &EstimatorConfig { kind, ..*cfg }, rng)
}

/// Naive straight-through: `h = Softmax_1(logits)`.
pub fn st_naive(tape: &mut Tape, logits: Var, cfg: &EstimatorConfig, rng: &mut RngStream) -> Result<SurrogateOutput> {
    estimate_as(EstimatorKind::StNaive, tape, logits, cfg, rng)
}

/// Straight-through Gumbel-Softmax: `h = Softmax_tau(logits + G)`.
pub fn stgs(tape: &mut Tape, logits: Var, cfg: &EstimatorConfig, rng: &mut RngStream) -> Result<SurrogateOutput> {
    estimate_as(EstimatorKind::Stgs, tape, logits, cfg, rng)
}

/// Rao-Blackwellised STGS averaging `K` conditional Gumbel-Softmax draws.
pub fn gr_mck(tape: &mut Tape, logits: Var, cfg: &EstimatorConfig, rng: &mut RngStream) -> Result<SurrogateOutput> {
    estimate_as(EstimatorKind::GrMck, tape, logits, cfg, rng)
}

/// Gapped straight-through: `h = Softmax_tau(logits + m1 - m2)` with the
/// perturbation computed from detached logits.
pub fn gst(tape: &mut Tape, logits: Var, cfg: &EstimatorConfig, rng: &mut RngStream) -> Result<SurrogateOutput> {
    estimate_as(EstimatorKind::Gst, tape, logits, cfg, rng)
}

/// GST with the perturbation computed from live logits (ablation).
pub fn nz_gst(tape: &mut Tape, logits: Var, cfg: &EstimatorConfig, rng: &mut RngStream) -> Result<SurrogateOutput> {
    estimate_as(EstimatorKind::NzGst, tape, logits, cfg, rng)
}
