mod common;

use common::{all_estimators, frozen_fd_error, uniform_row};
use gapped_st::autodiff::Tape;
use gapped_st::estimators::{
    build_surrogate, compute_m1, compute_m2, estimate, reinforce_grad, sample_noise, straight_through_combine,
    EstimatorConfig, Gap, Mode, Noise,
};
use gapped_st::samplers::{LogitVector, OneHotSample, RngStream};
use gapped_st::stats::chi_square_p_value;
use gapped_st::tensor::{argmax, Tensor};
use gapped_st::variance::{collect_gradients, gradient_variance, LinearLossProbe};
use rand::Rng;

#[test]
fn frozen_noise_gradients_match_finite_differences() {
    let mut rng = RngStream::new(21);
    for trial in 0..10 {
        let tau = rng.gen_range(0.5..2.0);
        let logits = uniform_row(10, -2.0, 2.0, &mut rng);
        let w = uniform_row(10, -1.0, 1.0, &mut rng);
        for cfg in all_estimators(tau) {
            let err = frozen_fd_error(&cfg, &logits, &w, &mut rng.fork(trial));
            assert!(err < 1e-4, "{} trial {trial}: relative error {err:e}", cfg.label());
        }
    }
}

#[test]
fn combine_forward_is_hard_and_backward_is_surrogate() {
    let l = Tensor::matrix(1, 4, vec![0.2, -0.7, 1.3, 0.4]).unwrap();
    let w = Tensor::matrix(1, 4, vec![0.5, -1.0, 0.25, 2.0]).unwrap();
    let hard = OneHotSample::new(3, 4);
    let hard_t = Tensor::matrix(1, 4, hard.onehot.clone()).unwrap();

    let grad = |combined: bool| {
        let mut tape = Tape::new();
        let x = tape.param(l.clone());
        let h = tape.softmax_tau(x, 0.8).unwrap();
        let out = if combined {
            let c = straight_through_combine(&mut tape, &hard_t, h).unwrap();
            assert_eq!(tape.value(c).data(), hard_t.data());
            c
        } else {
            h
        };
        let wv = tape.constant(w.clone());
        let p = tape.mul(out, wv).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        tape.grad(x).unwrap().clone()
    };
    assert_eq!(grad(true).data(), grad(false).data());
}

#[test]
fn hard_outputs_follow_softmax() {
    let logits = Tensor::matrix(1, 4, vec![0.5, -0.3, 1.2, 0.0]).unwrap();
    let probs = LogitVector::new(logits.data().to_vec()).unwrap().probs();
    for cfg in all_estimators(0.5) {
        let mut rng = RngStream::new(22);
        let mut counts = vec![0u64; 4];
        for _ in 0..20_000 {
            let mut tape = Tape::new();
            let x = tape.constant(logits.clone());
            let out = estimate(&mut tape, x, &cfg, &mut rng).unwrap();
            let v = tape.value(out.output).data();
            assert_eq!(v.iter().filter(|&&e| e == 1.0).count(), 1);
            assert_eq!(v.iter().filter(|&&e| e == 0.0).count(), 3);
            counts[argmax(v)] += 1;
        }
        let p = chi_square_p_value(&counts, &probs);
        assert!(p > 0.01, "{}: p {p}", cfg.label());
    }
}

#[test]
fn consistent_estimators_share_argmax_with_sample() {
    let mut rng = RngStream::new(23);
    let consistent: Vec<EstimatorConfig> = all_estimators(0.5)
        .into_iter()
        .filter(|c| !matches!(c.label().as_str(), "ST" | "REINFORCE"))
        .collect();
    for t in 0..2000 {
        let logits = uniform_row(6, -3.0, 3.0, &mut rng);
        for cfg in &consistent {
            let mut tape = Tape::new();
            let x = tape.constant(logits.clone());
            let out = estimate(&mut tape, x, cfg, &mut rng).unwrap();
            // Gap 0 only ties the max (up to rounding), so compare values.
            let h = tape.value(out.surrogate_probs).data();
            let short = h[argmax(h)] - h[out.samples[0].index];
            assert!(short <= 1e-12, "{} draw {t}: {short:e}", cfg.label());
        }
    }
}

#[test]
fn m1_m2_examples() {
    let l = [2.0, 1.0, 0.0];
    assert_eq!(compute_m1(&l, &OneHotSample::new(0, 3)), vec![0.0, 0.0, 0.0]);
    assert_eq!(compute_m1(&l, &OneHotSample::new(2, 3)), vec![0.0, 0.0, 2.0]);
    let d = OneHotSample::new(2, 3);
    let m1 = compute_m1(&l, &d);
    let m2 = compute_m2(&l, &d, 1.0);
    assert_eq!(m2, vec![1.0, 0.0, 0.0]);
    let z: Vec<f64> = (0..3).map(|j| l[j] + m1[j] - m2[j]).collect();
    assert_eq!(z, vec![1.0, 1.0, 2.0]);
    assert_eq!(compute_m2(&l, &OneHotSample::new(0, 3), 0.0), vec![0.0, 0.0, 0.0]);
}

#[test]
fn gst_perturbed_logits_keep_the_gap() {
    let mut rng = RngStream::new(24);
    for g in [0.0, 0.5, 1.0, 3.0] {
        let cfg = EstimatorConfig::gst(Gap::Const(g), 0.5);
        for _ in 0..2000 {
            let l = uniform_row(8, -3.0, 3.0, &mut rng);
            let noise = sample_noise(&l, &cfg, &mut rng).unwrap();
            let Noise::Perturbation(m) = &noise.noise else {
                panic!("GST noise")
            };
            let z: Vec<f64> = l.data().iter().zip(m.data()).map(|(a, b)| a + b).collect();
            let i = noise.samples[0].index;
            let runner_up = z
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(z[i] - runner_up >= g - 1e-9);
        }
    }
}

#[test]
fn nz_gst_gradient_differs_from_gst() {
    let mut rng = RngStream::new(25);
    let mut differ = 0;
    for t in 0..20 {
        let l = uniform_row(10, -2.0, 2.0, &mut rng);
        let w = uniform_row(10, -1.0, 1.0, &mut rng);
        let probe = LinearLossProbe::new(l.clone(), w);
        let gst = EstimatorConfig::gst(Gap::Const(1.0), 0.5);
        let nz = EstimatorConfig::nz_gst(Gap::Const(1.0), 0.5);
        let a = collect_gradients(&probe, &gst, 1, &mut rng.fork(t)).unwrap();
        let b = collect_gradients(&probe, &nz, 1, &mut rng.fork(t)).unwrap();
        if a.samples.max_abs_diff(&b.samples) > 1e-8 {
            differ += 1;
        }
    }
    assert!(differ >= 15, "only {differ}/20 differ");
}

#[test]
fn stgs_soft_sample_approaches_hard_at_low_temperature() {
    let cfg = EstimatorConfig::stgs(1e-3).with_mode(Mode::Soft);
    let mut rng = RngStream::new(26);
    let mut checked = 0;
    for _ in 0..2000 {
        let l = uniform_row(5, -2.0, 2.0, &mut rng);
        let noise = sample_noise(&l, &cfg, &mut rng).unwrap();
        let Noise::Gumbel(g) = &noise.noise else {
            panic!("STGS noise")
        };
        let mut z: Vec<f64> = l.data().iter().zip(g.data()).map(|(a, b)| a + b).collect();
        z.sort_by(|a, b| b.total_cmp(a));
        if z[0] - z[1] <= 0.1 {
            continue;
        }
        let mut tape = Tape::new();
        let x = tape.constant(l.clone());
        let out = build_surrogate(&mut tape, x, &noise, &cfg).unwrap();
        let h = tape.value(out.output).data();
        let err = h
            .iter()
            .zip(&noise.samples[0].onehot)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6);
        checked += 1;
    }
    assert!(checked > 1000);
}

#[test]
fn reinforce_two_category_gradient() {
    let lv = LogitVector::new(vec![0.0, 0.0]).unwrap();
    let batch = reinforce_grad(
        &lv,
        |i| if i == 0 { 1.0 } else { 0.0 },
        &mut RngStream::new(27),
        1_000_000,
    )
    .unwrap();
    let mean = batch.mean();
    assert!((mean[0] - 0.25).abs() < 0.005, "{mean:?}");
    assert!((mean[1] + 0.25).abs() < 0.005, "{mean:?}");

    let lv = LogitVector::new(vec![0.3, -0.2, 1.0]).unwrap();
    let batch = reinforce_grad(&lv, |_| 2.0, &mut RngStream::new(28), 100_000).unwrap();
    for m in batch.per_parameter() {
        assert!(
            m.mean.abs() < 4.0 * m.std_error(),
            "mean {} se {}",
            m.mean,
            m.std_error()
        );
    }
}

#[test]
fn reinforce_noisier_than_stgs() {
    let mut rng = RngStream::new(29);
    let probe = LinearLossProbe::new(
        uniform_row(10, -2.0, 2.0, &mut rng),
        uniform_row(10, -1.0, 1.0, &mut rng),
    );
    let r = gradient_variance(&probe, &EstimatorConfig::reinforce(), 10_000, &mut rng.fork(1)).unwrap();
    let s = gradient_variance(&probe, &EstimatorConfig::stgs(0.5), 10_000, &mut rng.fork(2)).unwrap();
    assert!(
        r.total_variance > s.total_variance,
        "{} vs {}",
        r.total_variance,
        s.total_variance
    );
}

#[test]
fn grmc1_matches_stgs_in_distribution() {
    let mut rng = RngStream::new(30);
    let probe = LinearLossProbe::new(
        uniform_row(10, -2.0, 2.0, &mut rng),
        uniform_row(10, -1.0, 1.0, &mut rng),
    );
    let a = collect_gradients(&probe, &EstimatorConfig::stgs(0.5), 10_000, &mut rng.fork(1)).unwrap();
    let b = collect_gradients(&probe, &EstimatorConfig::gr_mck(1, 0.5), 10_000, &mut rng.fork(2)).unwrap();
    for (k, (x, y)) in a.per_parameter().iter().zip(b.per_parameter()).enumerate() {
        let se = (x.std_error().powi(2) + y.std_error().powi(2)).sqrt();
        assert!(
            (x.mean - y.mean).abs() < 4.0 * se,
            "param {k}: {} vs {}",
            x.mean,
            y.mean
        );
    }
    let rel = (a.total_variance() - b.total_variance()).abs() / a.total_variance();
    assert!(rel < 0.1, "variance ratio off by {rel}");
}

#[test]
fn same_seed_same_gradients() {
    let mut rng = RngStream::new(31);
    let probe = LinearLossProbe::new(
        uniform_row(10, -2.0, 2.0, &mut rng),
        uniform_row(10, -1.0, 1.0, &mut rng),
    );
    for cfg in all_estimators(0.7) {
        let a = collect_gradients(&probe, &cfg, 50, &mut RngStream::new(5)).unwrap();
        let b = collect_gradients(&probe, &cfg, 50, &mut RngStream::new(5)).unwrap();
        assert_eq!(a, b, "{}", cfg.label());
    }
}
