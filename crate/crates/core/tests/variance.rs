mod common;

use common::uniform_row;
use gapped_st::autodiff::Tape;
use gapped_st::estimators::{estimate, sample_noise, EstimatorConfig, Gap};
use gapped_st::par::Exec;
use gapped_st::samplers::RngStream;
use gapped_st::variance::{
    gradient_variance, gradient_variance_with, surrogate_entropy, variance_decomposition, write_variance_csv,
    GradientProbe, LinearLossProbe, VarianceError,
};

fn probe(seed: u64) -> LinearLossProbe {
    let mut rng = RngStream::new(seed);
    LinearLossProbe::new(
        uniform_row(10, -2.0, 2.0, &mut rng),
        uniform_row(10, -1.0, 1.0, &mut rng),
    )
}

#[test]
fn grmc_variance_shrinks_with_k() {
    let p = probe(51);
    let v: Vec<_> = [1, 10, 100]
        .iter()
        .map(|&k| {
            gradient_variance(
                &p,
                &EstimatorConfig::gr_mck(k, 0.5),
                2000,
                &mut RngStream::new(k as u64),
            )
            .unwrap()
        })
        .collect();
    for w in v.windows(2) {
        let se = (w[0].total_variance_stderr.powi(2) + w[1].total_variance_stderr.powi(2)).sqrt();
        assert!(
            w[1].total_variance <= w[0].total_variance + 3.0 * se,
            "{} then {}",
            w[0].total_variance,
            w[1].total_variance
        );
    }
}

#[test]
fn gst_below_stgs_on_linear_loss() {
    let p = probe(52);
    let g = gradient_variance(
        &p,
        &EstimatorConfig::gst(Gap::Const(1.0), 0.5),
        10_000,
        &mut RngStream::new(1),
    )
    .unwrap();
    let s = gradient_variance(&p, &EstimatorConfig::stgs(0.5), 10_000, &mut RngStream::new(2)).unwrap();
    assert!(
        g.total_variance <= s.total_variance,
        "{} vs {}",
        g.total_variance,
        s.total_variance
    );
}

#[test]
fn decomposition_terms() {
    let p = probe(53);
    let gst = variance_decomposition(
        &p,
        &EstimatorConfig::gst(Gap::Const(1.0), 0.5),
        50,
        50,
        &mut RngStream::new(3),
    )
    .unwrap();
    assert_eq!(gst.term_a, Some(0.0));

    let stgs = EstimatorConfig::stgs(0.5);
    let d = variance_decomposition(&p, &stgs, 200, 50, &mut RngStream::new(4)).unwrap();
    let total = gradient_variance(&p, &stgs, 10_000, &mut RngStream::new(5)).unwrap();
    let se = (d.total_variance_stderr.powi(2) + total.total_variance_stderr.powi(2)).sqrt();
    let sum = d.term_a.unwrap() + d.term_b.unwrap();
    assert!(
        (sum - total.total_variance).abs() < 3.0 * se,
        "{sum} vs {} (se {se})",
        total.total_variance
    );

    let a1 = variance_decomposition(&p, &EstimatorConfig::gr_mck(1, 0.5), 100, 50, &mut RngStream::new(6)).unwrap();
    let a100 = variance_decomposition(&p, &EstimatorConfig::gr_mck(100, 0.5), 100, 50, &mut RngStream::new(7)).unwrap();
    let ratio = a100.term_a.unwrap() / (a1.term_a.unwrap() / 100.0);
    assert!((ratio - 1.0).abs() < 0.2, "ratio {ratio}");
}

#[test]
fn gst_gradient_is_a_function_of_the_sample() {
    let p = probe(54);
    let cfg = EstimatorConfig::gst(Gap::Const(1.0), 0.5);
    let mut rng = RngStream::new(8);
    for _ in 0..200 {
        let a = sample_noise(&p.logits0(), &cfg, &mut rng).unwrap();
        let b = loop {
            let b = sample_noise(&p.logits0(), &cfg, &mut rng).unwrap();
            if b.samples == a.samples {
                break b;
            }
        };
        assert_eq!(p.gradient(&cfg, &a).unwrap(), p.gradient(&cfg, &b).unwrap());
    }
}

#[test]
fn too_few_resamples_rejected() {
    let err = gradient_variance(&probe(55), &EstimatorConfig::stgs(1.0), 99, &mut RngStream::new(0)).unwrap_err();
    assert!(matches!(err, VarianceError::TooFewResamples { min: 100, got: 99 }));
}

#[test]
fn sequential_and_parallel_agree_bitwise() {
    let p = probe(56);
    let cfg = EstimatorConfig::gr_mck(10, 0.5);
    let a = gradient_variance_with(Exec::Sequential, &p, &cfg, 500, &mut RngStream::new(9)).unwrap();
    let b = gradient_variance_with(Exec::Parallel, &p, &cfg, 500, &mut RngStream::new(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn entropy_ordering_at_low_temperature() {
    let cfgs = [
        EstimatorConfig::gst(Gap::Const(1.2), 0.1),
        EstimatorConfig::stgs(0.1),
        EstimatorConfig::gr_mck(100, 0.1),
    ];
    let mut rng = RngStream::new(57);
    let mut means = [0.0; 3];
    for _ in 0..100 {
        let l = uniform_row(10, -2.0, 2.0, &mut rng);
        for (m, cfg) in means.iter_mut().zip(&cfgs) {
            let mut tape = Tape::new();
            let x = tape.constant(l.clone());
            let out = estimate(&mut tape, x, cfg, &mut rng).unwrap();
            *m += surrogate_entropy(&tape, &out) / 100.0;
        }
    }
    assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
}

#[test]
fn csv_has_the_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.csv");
    let r = gradient_variance(
        &probe(58),
        &EstimatorConfig::gst(Gap::Const(1.0), 0.5),
        100,
        &mut RngStream::new(0),
    )
    .unwrap();
    write_variance_csv(&path, &[r]).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "estimator,tau,gap,K,total_variance,term_a,term_b,n_resamples,seed"
    );
    assert!(text.lines().nth(1).unwrap().starts_with("GST-1.0,0.5,1.0,1,"));
}
