use gvcl::gaussian::{
    diag_approx_by_precision, film_optimal_scale, film_scaled_kl, film_scaled_kl_curvature, film_scaled_kl_derivative,
    kl_diag, kl_lambda, kl_lambda_gamma, kl_lambda_tilde, low_rank_select, temper,
};
use gvcl::{verify, ClippedPrecisionPrior, DiagGaussian, SymMatrix};
use proptest::prelude::*;

fn gaussian(dim: usize) -> impl Strategy<Value = DiagGaussian> {
    (
        prop::collection::vec(-3.0..3.0f64, dim),
        prop::collection::vec(0.05..4.0f64, dim),
    )
        .prop_map(|(mu, var)| DiagGaussian::new(mu, var).unwrap())
}

fn pair() -> impl Strategy<Value = (DiagGaussian, DiagGaussian)> {
    (1usize..6).prop_flat_map(|d| (gaussian(d), gaussian(d)))
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_on_itself((q, p) in pair()) {
        prop_assert!(kl_diag(&q, &p).unwrap() >= -1e-12);
        prop_assert!(kl_diag(&q, &q).unwrap().abs() < 1e-12);
    }

    #[test]
    fn tempering_both_sides_scales_only_the_mean_term((q, p) in pair(), lambda in 0.1..10.0f64) {
        let lhs = kl_diag(&temper(&q, lambda).unwrap(), &temper(&p, lambda).unwrap()).unwrap();
        let rhs = kl_lambda(&q, &p, lambda).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()), "{lhs} vs {rhs}");
    }

    #[test]
    fn unit_lambda_gives_plain_kl((q, p) in pair()) {
        let kl = kl_diag(&q, &p).unwrap();
        prop_assert!((kl_lambda(&q, &p, 1.0).unwrap() - kl).abs() < 1e-12);
        prop_assert!((kl_lambda_gamma(&q, &p, 1.0, 1.0).unwrap() - kl).abs() < 1e-12);
    }

    #[test]
    fn clipped_prior_is_plain_kl_at_unit_lambda_below_prior_variance(
        (q, p) in pair(), shrink in 0.05..1.0f64
    ) {
        let base = DiagGaussian::new(p.mu().to_vec(), p.var().iter().map(|v| v * shrink).collect()).unwrap();
        let prior = ClippedPrecisionPrior::new(base.clone(), p.var().to_vec(), 1.0).unwrap();
        let want = kl_diag(&q, &base).unwrap();
        prop_assert!((kl_lambda_tilde(&q, &prior).unwrap() - want).abs() < 1e-9 * (1.0 + want));
    }

    #[test]
    fn clipped_precision_never_drops_below_the_initial_prior((_q, p) in pair(), lambda in 1.0..200.0f64, grow in 1.0..5.0f64) {
        let v0: Vec<f64> = p.var().iter().map(|v| v / grow).collect();
        let prior = ClippedPrecisionPrior::new(p.clone(), v0.clone(), lambda).unwrap();
        for (prec, v0) in prior.precision().iter().zip(&v0) {
            prop_assert!((prec - 1.0 / v0).abs() < 1e-9 / v0);
        }
    }

    #[test]
    fn film_scale_is_the_stationary_minimum((q, p) in pair()) {
        let c = film_optimal_scale(&q, &p).unwrap();
        prop_assert!(c > 0.0);
        prop_assert!(film_scaled_kl_derivative(&q, &p, c).unwrap().abs() < 1e-9 * (1.0 + q.dim() as f64 / c));
        prop_assert!(film_scaled_kl_curvature(&q, &p, c).unwrap() > 0.0);
        let at = film_scaled_kl(&q, &p, c).unwrap();
        for side in [0.99 * c, 1.01 * c] {
            prop_assert!(film_scaled_kl(&q, &p, side).unwrap() > at);
        }
    }
}

#[test]
fn closed_form_values() {
    let q = DiagGaussian::new(vec![1.0], vec![2.0]).unwrap();
    let p = DiagGaussian::new(vec![0.0], vec![1.0]).unwrap();
    // ½(ln(1/2) − 1 + 2 + 1)
    assert!((kl_diag(&q, &p).unwrap() - 0.653_426_409_720_027_3).abs() < 1e-15);
    // ½(3·1 + 2 + ln(1/2) − 1)
    assert!((kl_lambda(&q, &p, 3.0).unwrap() - 1.653_426_409_720_027_3).abs() < 1e-15);
}

#[test]
fn clipped_precision_values() {
    let base = DiagGaussian::new(vec![0.0, 0.0], vec![0.25, 2.0]).unwrap();
    let prior = ClippedPrecisionPrior::new(base, vec![1.0, 1.0], 10.0).unwrap();
    // 10·(4 − 1) + 1, and a variance above the initial prior clips to 1
    assert_eq!(prior.precision(), vec![31.0, 1.0]);
}

#[test]
fn film_scale_values() {
    let unit = DiagGaussian::new(vec![0.0], vec![1.0]).unwrap();
    let q = DiagGaussian::new(vec![2.0], vec![1.0]).unwrap();
    assert!((film_optimal_scale(&q, &unit).unwrap() - 0.2f64.sqrt()).abs() < 1e-15);
    assert!((film_optimal_scale(&unit, &unit).unwrap() - 1.0).abs() < 1e-15);
    let shifted = DiagGaussian::new(vec![1.0], vec![1.0]).unwrap();
    assert!((film_optimal_scale(&shifted, &shifted).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn diagonal_matching_values() {
    let h = SymMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
    let v = diag_approx_by_precision(&h).unwrap();
    assert!((v[0] - 0.5).abs() < 1e-15 && (v[1] - 1.0 / 3.0).abs() < 1e-15);
    let indefinite = SymMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
    assert!(diag_approx_by_precision(&indefinite).is_err());
}

#[test]
fn low_rank_keeps_largest_eigenvalues() {
    let h = SymMatrix::diagonal(&[1.0, 5.0, 3.0]);
    let lr = low_rank_select(&h, 2, 0.01).unwrap();
    let mut kept = lr.values.clone();
    kept.sort_by(f64::total_cmp);
    assert!((kept[0] - 3.0).abs() < 1e-10 && (kept[1] - 5.0).abs() < 1e-10);
    let r = lr.reconstruct();
    for (i, want) in [0.01, 5.0, 3.0].iter().enumerate() {
        assert!((r.get(i, i) - want).abs() < 1e-10);
    }
    assert!(low_rank_select(&h, 3, 0.01).is_err());
    assert!(low_rank_select(&h, 1, 0.0).is_err());
}

#[test]
fn numeric_and_exhaustive_oracles_agree() {
    verify::diag_precision_matching(20).unwrap();
    verify::low_rank_exhaustive(30).unwrap();
    verify::film_scale_root(50).unwrap();
}
