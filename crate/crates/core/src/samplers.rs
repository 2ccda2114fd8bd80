//! Gumbel, exponential and categorical sampling, including draws of the
//! perturbed logits conditioned on the selected category.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{argmax, log_sum_exp, softmax};

/// Lower/upper clamp applied to uniforms before taking logs.
pub const UNIFORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("logit vector must have at least one entry")]
    Empty,
    #[error("logit {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("category index {index} out of range for {n} categories")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("rejection sampling gave up after {tries} tries (conditioning event too rare)")]
    RejectionExhausted { tries: usize },
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded, counter-based random stream (ChaCha8).
///
/// Independent sampling contexts get independent streams through
/// [`RngStream::fork`] (pure, keyed by an id) or [`RngStream::split`]
/// (advances `self`).
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream determined only by `(self.seed, self.stream, id)`.
    pub fn fork(&self, id: u64) -> Self {
        let key = splitmix64(self.seed ^ splitmix64(self.stream ^ 0xA5A5_5A5A_0F0F_F0F0));
        Self::with_stream(key, id)
    }

    /// Fresh stream seeded from the next output of `self`.
    pub fn split(&mut self) -> Self {
        Self::new(self.rng.next_u64())
    }

    /// Uniform on `[UNIFORM_EPS, 1 - UNIFORM_EPS]`.
    pub fn uniform(&mut self) -> f64 {
        let u: f64 = self.rng.gen();
        u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    }

    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform().ln()).ln()
    }

    pub fn exponential(&mut self) -> f64 {
        -self.uniform().ln()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// A finite, non-empty logit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self, SamplerError> {
        if values.is_empty() {
            return Err(SamplerError::Empty);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(SamplerError::NonFinite { index, value });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `log Z = log sum_j exp(l_j)`.
    pub fn log_partition(&self) -> f64 {
        log_sum_exp(&self.0)
    }

    /// Log-sum-exp of every logit except `i` (`-inf` when `N = 1`).
    pub fn log_sum_exp_excluding(&self, i: usize) -> f64 {
        let rest: Vec<f64> = self
            .0
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .collect();
        log_sum_exp(&rest)
    }

    /// `Softmax_1(l)`.
    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.0, 1.0)
    }

    fn check_index(&self, index: usize) -> Result<(), SamplerError> {
        if index >= self.len() {
            return Err(SamplerError::IndexOutOfRange { index, n: self.len() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneHotSample {
    pub index: usize,
    pub onehot: Vec<f64>,
}

impl OneHotSample {
    pub fn new(index: usize, n: usize) -> Self {
        let mut onehot = vec![0.0; n];
        onehot[index] = 1.0;
        Self { index, onehot }
    }

    pub fn len(&self) -> usize {
        self.onehot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.onehot.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedLogits {
    pub values: Vec<f64>,
    pub argmax_index: usize,
}

pub fn sample_gumbel(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gumbel()).collect()
}

pub fn sample_exponential(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.exponential()).collect()
}

/// Gumbel-max draw: `argmax_i (l_i + G_i)` with `G` i.i.d. Gumbel(0, 1).
pub fn gumbel_max(logits: &LogitVector, rng: &mut RngStream) -> (OneHotSample, PerturbedLogits) {
    let values: Vec<f64> = logits.values().iter().map(|l| l + rng.gumbel()).collect();
    let index = argmax(&values);
    (
        OneHotSample::new(index, logits.len()),
        PerturbedLogits {
            values,
            argmax_index: index,
        },
    )
}

/// Draws `l + G` conditioned on `argmax(l + G) = given.index`.
///
/// With `E ~ Exp(1)` i.i.d. and `Z` the partition function:
/// selected entry `-log(E_i / Z)`, others `-log(E_j / e^{l_j} + E_i / Z)`.
/// The sum inside the log is evaluated in log space.
pub fn conditional_perturbed_logits(
    logits: &LogitVector,
    given: &OneHotSample,
    rng: &mut RngStream,
) -> Result<PerturbedLogits, SamplerError> {
    logits.check_index(given.index)?;
    let i = given.index;
    let log_z = logits.log_partition();
    let e = sample_exponential(rng, logits.len());
    let log_sel = e[i].ln() - log_z;
    let values = logits
        .values()
        .iter()
        .zip(&e)
        .enumerate()
        .map(|(j, (&l, &ej))| {
            if j == i {
                -log_sel
            } else {
                -log_add_exp(ej.ln() - l, log_sel)
            }
        })
        .collect();
    Ok(PerturbedLogits {
        values,
        argmax_index: i,
    })
}

/// Reference conditional sampler: redraw `l + G` until the argmax matches.
pub fn rejection_oracle(
    logits: &LogitVector,
    given: &OneHotSample,
    rng: &mut RngStream,
    max_tries: usize,
) -> Result<PerturbedLogits, SamplerError> {
    logits.check_index(given.index)?;
    for _ in 0..max_tries {
        let (d, perturbed) = gumbel_max(logits, rng);
        if d.index == given.index {
            return Ok(perturbed);
        }
    }
    Err(SamplerError::RejectionExhausted { tries: max_tries })
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let a = sample_gumbel(&mut RngStream::new(42), 16);
        let b = sample_gumbel(&mut RngStream::new(42), 16);
        assert_eq!(a, b);
        let c = sample_exponential(&mut RngStream::new(42), 16);
        let d = sample_exponential(&mut RngStream::new(42), 16);
        assert_eq!(c, d);
        assert_ne!(a, sample_gumbel(&mut RngStream::new(43), 16));
    }

    #[test]
    fn forks_are_distinct_and_stable() {
        let root = RngStream::new(9);
        let x = root.fork(1).next_u64();
        let y = root.fork(2).next_u64();
        assert_ne!(x, y);
        assert_eq!(x, root.fork(1).next_u64());
        let mut a = RngStream::new(9);
        let s1 = a.split().next_u64();
        let s2 = a.split().next_u64();
        assert_ne!(s1, s2);
    }

    #[test]
    fn single_category_always_zero() {
        let l = LogitVector::new(vec![3.7]).unwrap();
        let mut rng = RngStream::new(1);
        for _ in 0..100 {
            assert_eq!(gumbel_max(&l, &mut rng).0.index, 0);
        }
    }

    #[test]
    fn rejects_bad_logits() {
        assert_eq!(LogitVector::new(vec![]), Err(SamplerError::Empty));
        assert!(LogitVector::new(vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn conditional_argmax_matches_given() {
        let l = LogitVector::new(vec![0.3, -0.5, 1.1, 4.0, -6.0]).unwrap();
        let mut rng = RngStream::new(5);
        for k in 0..100_000 {
            let given = OneHotSample::new(k % 5, 5);
            let p = conditional_perturbed_logits(&l, &given, &mut rng).unwrap();
            assert_eq!(argmax(&p.values), given.index);
        }
    }

    #[test]
    fn rejection_exhaustion_is_an_error() {
        let l = LogitVector::new(vec![0.0, -60.0]).unwrap();
        let err = rejection_oracle(&l, &OneHotSample::new(1, 2), &mut RngStream::new(0), 50);
        assert_eq!(err, Err(SamplerError::RejectionExhausted { tries: 50 }));
    }
}
