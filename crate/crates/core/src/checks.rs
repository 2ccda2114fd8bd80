//! Statistical verification suites shared by the CLI and the tests.

use rand::Rng;
use serde::Serialize;

use crate::gap::{gap_closed_form, gap_logistic_form, gap_monte_carlo, GapError, McPath};
use crate::par::{self, Exec};
use crate::samplers::{
    conditional_perturbed_logits, gumbel_max, rejection_oracle, LogitVector, OneHotSample, RngStream, SamplerError,
};
use crate::stats::{chi_square_p_value, ks_two_sample};

/// Monte-Carlo agreement threshold, in standard errors.
pub const Z_TOLERANCE: f64 = 3.0;
/// Relative tolerance between the closed and logistic gap forms.
pub const FORM_TOLERANCE: f64 = 1e-10;
/// Significance level for the distributional checks.
pub const ALPHA: f64 = 0.01;

pub const CASE_SIZES: [usize; 4] = [2, 5, 10, 50];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapCase {
    pub case: usize,
    pub logits: Vec<f64>,
    pub index: usize,
    pub analytic: f64,
    pub logistic: f64,
    pub mc: f64,
    pub stderr: f64,
    pub pass: bool,
}

impl GapCase {
    pub fn z(&self) -> f64 {
        (self.mc - self.analytic).abs() / self.stderr
    }
}

/// `count` random `(logits, index)` pairs, cycling the size through
/// [`CASE_SIZES`], logits uniform on `[-3, 3]`.
pub fn random_gap_cases(count: usize, rng: &RngStream) -> Vec<(Vec<f64>, usize)> {
    (0..count)
        .map(|c| {
            let mut r = rng.fork(c as u64);
            let n = CASE_SIZES[c % CASE_SIZES.len()];
            let logits = (0..n).map(|_| r.gen_range(-3.0..3.0)).collect();
            (logits, r.gen_range(0..n))
        })
        .collect()
}

/// Closed form vs logistic form vs conditional-sampler Monte Carlo for each
/// case. Case `c` uses sub-stream `c` of `rng`.
pub fn verify_gap_cases(cases: &[(Vec<f64>, usize)], n: usize, rng: &RngStream) -> Result<Vec<GapCase>, GapError> {
    cases
        .iter()
        .enumerate()
        .map(|(c, (logits, i))| {
            let lv = LogitVector::new(logits.clone())?;
            let analytic = gap_closed_form(&lv, *i)?;
            let logistic = gap_logistic_form(&lv, *i)?;
            let rep = gap_monte_carlo(&lv, *i, &mut rng.fork(c as u64), n, McPath::Conditional)?;
            let pass = rep.z_score() < Z_TOLERANCE && ((logistic - analytic) / analytic).abs() <= FORM_TOLERANCE;
            Ok(GapCase {
                case: c,
                logits: logits.clone(),
                index: *i,
                analytic,
                logistic,
                mc: rep.mc_gap,
                stderr: rep.mc_stderr,
                pass,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleCheck {
    pub name: String,
    pub statistic: f64,
    pub p_value: f64,
    pub pass: bool,
}

/// Logit vectors exercised by [`sample_check`].
pub fn sample_check_vectors() -> Vec<Vec<f64>> {
    vec![
        vec![0.0, 0.0],
        vec![1.0, -1.0, 0.5],
        vec![0.3, -0.5, 1.1, -0.2],
        vec![1.5, 0.0, -1.0, 0.5, -0.5],
        vec![-0.8, 0.9, 0.0, 0.7, -0.3],
    ]
}

/// Chi-square of Gumbel-max frequencies against `Softmax_1`, and
/// per-coordinate two-sample KS of the conditional sampler against the
/// rejection oracle for every conditioning index. `n` draws per test.
pub fn sample_check(seed: u64, n: usize) -> Result<Vec<SampleCheck>, SamplerError> {
    let root = RngStream::new(seed);
    let vectors = sample_check_vectors();
    let mut out = Vec::new();
    for (v, logits) in vectors.iter().enumerate() {
        let lv = LogitVector::new(logits.clone())?;
        let mut r = root.fork(v as u64).fork(0);
        let mut counts = vec![0u64; lv.len()];
        for _ in 0..n {
            counts[gumbel_max(&lv, &mut r).0.index] += 1;
        }
        let p = chi_square_p_value(&counts, &lv.probs());
        out.push(SampleCheck {
            name: format!("chi2 gumbel_max v{v}"),
            statistic: counts.len() as f64,
            p_value: p,
            pass: p > ALPHA,
        });

        let per_index = par::try_map_range(Exec::default(), lv.len(), |i| {
            conditional_vs_rejection(&lv, i, n, &root.fork(v as u64).fork(1 + i as u64))
        })?;
        for (i, coords) in per_index.into_iter().enumerate() {
            for (j, (d, p)) in coords.into_iter().enumerate() {
                out.push(SampleCheck {
                    name: format!("ks v{v} given {i} coord {j}"),
                    statistic: d,
                    p_value: p,
                    pass: p > ALPHA,
                });
            }
        }
    }
    Ok(out)
}

/// Per-coordinate `(D, p)` of the KS test between `n` conditional draws and
/// `n` accepted rejection draws given category `i`.
pub fn conditional_vs_rejection(
    lv: &LogitVector,
    i: usize,
    n: usize,
    rng: &RngStream,
) -> Result<Vec<(f64, f64)>, SamplerError> {
    let given = OneHotSample::new(i, lv.len());
    let (mut rc, mut rr) = (rng.fork(0), rng.fork(1));
    let mut cond = vec![Vec::with_capacity(n); lv.len()];
    let mut rej = vec![Vec::with_capacity(n); lv.len()];
    for _ in 0..n {
        let a = conditional_perturbed_logits(lv, &given, &mut rc)?;
        let b = rejection_oracle(lv, &given, &mut rr, 1_000_000)?;
        for j in 0..lv.len() {
            cond[j].push(a.values[j]);
            rej[j].push(b.values[j]);
        }
    }
    Ok(cond.iter().zip(&rej).map(|(a, b)| ks_two_sample(a, b)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_cases_cycle_sizes_and_are_seeded() {
        let a = random_gap_cases(8, &RngStream::new(7));
        assert_eq!(a, random_gap_cases(8, &RngStream::new(7)));
        let sizes: Vec<usize> = a.iter().map(|(l, _)| l.len()).collect();
        assert_eq!(sizes, vec![2, 5, 10, 50, 2, 5, 10, 50]);
        assert!(a.iter().all(|(l, i)| *i < l.len()));
    }
}
