use gapped_st::checks::{random_gap_cases, verify_gap_cases};
use gapped_st::gap::{
    gap_closed_form, gap_from_logit_difference, gap_logistic_form, gap_monte_carlo, logistic_difference_p_value, McPath,
};
use gapped_st::samplers::{LogitVector, RngStream};
use rand::Rng;

const TWO_LN2: f64 = 1.386_294_361_119_890_6;
// Closed form at logits [0, 3], index 1, evaluated independently.
const GAP_0_3: f64 = 3.200_367_578_471_949_2;

fn lv(v: &[f64]) -> LogitVector {
    LogitVector::new(v.to_vec()).unwrap()
}

#[test]
fn closed_and_logistic_forms_agree() {
    let mut rng = RngStream::new(41);
    for c in 0..100 {
        let n = [2, 5, 50][c % 3];
        let l: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let i = rng.gen_range(0..n);
        let a = gap_closed_form(&lv(&l), i).unwrap();
        let b = gap_logistic_form(&lv(&l), i).unwrap();
        assert!(((a - b) / a).abs() <= 1e-10, "case {c}: {a} vs {b}");
        assert!(a >= 1.0);
    }
    assert!((gap_logistic_form(&lv(&[0.0, 0.0]), 0).unwrap() - TWO_LN2).abs() < 1e-15);
    assert!((gap_closed_form(&lv(&[0.0, 3.0]), 1).unwrap() - GAP_0_3).abs() < 1e-12);
}

#[test]
fn gap_grows_with_logit_margin() {
    let grid: Vec<f64> = (0..100).map(|k| -10.0 + 20.0 * k as f64 / 99.0).collect();
    let g: Vec<f64> = grid.iter().map(|&x| gap_from_logit_difference(x).unwrap()).collect();
    assert!(g.windows(2).all(|w| w[1] > w[0]));
    assert!((gap_from_logit_difference(-20.0).unwrap() - 1.0).abs() < 1e-6);
    let hi = gap_from_logit_difference(20.0).unwrap();
    assert!(((hi - 20.0) / 20.0).abs() < 1e-6);
}

#[test]
fn monte_carlo_two_categories() {
    let rep = gap_monte_carlo(
        &lv(&[0.0, 0.0]),
        0,
        &mut RngStream::new(42),
        1_000_000,
        McPath::Conditional,
    )
    .unwrap();
    assert!((rep.analytic_gap - TWO_LN2).abs() < 1e-12);
    assert!((rep.mc_gap - TWO_LN2).abs() < 3.0 * rep.mc_stderr, "{rep:?}");

    let rep = gap_monte_carlo(
        &lv(&[0.0, 3.0]),
        1,
        &mut RngStream::new(43),
        200_000,
        McPath::Conditional,
    )
    .unwrap();
    assert!(rep.z_score() < 3.0, "{rep:?}");
}

#[test]
fn rejection_and_conditional_paths_agree() {
    let l = lv(&[0.4, -0.6, 1.0, 0.2]);
    let a = gap_monte_carlo(&l, 3, &mut RngStream::new(44), 200_000, McPath::Conditional).unwrap();
    let b = gap_monte_carlo(&l, 3, &mut RngStream::new(45), 400_000, McPath::Rejection).unwrap();
    let se = (a.mc_stderr.powi(2) + b.mc_stderr.powi(2)).sqrt();
    assert!((a.mc_gap - b.mc_gap).abs() < 3.0 * se, "{} vs {}", a.mc_gap, b.mc_gap);
}

#[test]
fn random_suite_agrees() {
    let rng = RngStream::new(46);
    let cases = random_gap_cases(20, &rng);
    let results = verify_gap_cases(&cases, 100_000, &rng).unwrap();
    let failed: Vec<_> = results.iter().filter(|r| !r.pass).collect();
    assert!(failed.is_empty(), "{failed:?}");
}

#[test]
fn gumbel_difference_is_logistic() {
    assert!(logistic_difference_p_value(&mut RngStream::new(47), 100_000) > 0.01);
}
