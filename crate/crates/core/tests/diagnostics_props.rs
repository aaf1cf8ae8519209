use confbal::diagnostics::{
    association_stats, balance_report, bootstrap_se, bootstrap_with_indices, smd, CovariateKind,
};
use confbal::estimators::{ipw_weights, EstimateConfig, Method};
use confbal::rng::stream_rng;
use confbal::Dataset;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn expit(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Column 0 confounds, column 1 drives treatment only, column 2 drives the
/// outcome only, column 3 is noise. Returns the data and the true propensity.
fn labeled(n: usize, seed: u64) -> (Dataset<f64>, Vec<f64>) {
    let mut rng = stream_rng(seed, 0);
    let x = Array2::from_shape_fn((n, 4), |_| rng.sample::<f64, _>(StandardNormal));
    let pi: Vec<f64> = (0..n).map(|i| expit(0.8 * x[[i, 0]] + 0.8 * x[[i, 1]])).collect();
    let a: Vec<bool> = pi.iter().map(|&p| rng.random::<f64>() < p).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| 2.0 * x[[i, 0]] + 2.0 * x[[i, 2]] + rng.sample::<f64, _>(StandardNormal))
        .collect();
    (Dataset::new(x, a, y).unwrap(), pi)
}

proptest! {
    #[test]
    fn smd_is_affine_invariant(
        x in prop::collection::vec(-50.0f64..50.0, 8..40),
        w in prop::collection::vec(0.1f64..4.0, 40),
        c in prop::sample::select(vec![-3.5, -0.2, 0.7, 12.0]),
        d in -100.0f64..100.0,
    ) {
        let n = x.len();
        let a: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
        let w = &w[..n];
        let base = smd(&x, &a, Some(w));
        prop_assume!(base.is_ok());
        let t: Vec<f64> = x.iter().map(|v| c * v + d).collect();
        let diff = (smd(&t, &a, Some(w)).unwrap() - base.unwrap()).abs();
        prop_assert!(diff < 1e-12 * (1.0 + d.abs()) * 100.0, "diff {}", diff);
    }
}

#[test]
fn reductions_add_up() {
    let (d, pi) = labeled(600, 1);
    let w = ipw_weights(&pi, d.treatment());
    let r = balance_report(&d, &w).unwrap();
    let total: f64 = r.rows.iter().map(|v| v.reduction).sum();
    let before: f64 = r.rows.iter().map(|v| v.smd_before).sum();
    let after: f64 = r.rows.iter().map(|v| v.smd_after).sum();
    assert!((total - (before - after)).abs() < 1e-12);
    assert!(r.rows.windows(2).all(|p| p[0].reduction >= p[1].reduction));
    assert!(r.rows.iter().all(|v| v.reduction == v.smd_before - v.smd_after));
}

#[test]
fn unit_weights_leave_smd_unchanged() {
    let (d, _) = labeled(300, 2);
    let r = balance_report(&d, &vec![1.0; 300]).unwrap();
    assert!(r.rows.iter().all(|v| v.smd_before == v.smd_after));
}

#[test]
fn true_ipw_improves_confounder_balance() {
    let (d, pi) = labeled(2000, 3);
    let w = ipw_weights(&pi, d.treatment());
    let x: Vec<f64> = d.column(0);
    assert!(smd(&x, d.treatment(), Some(&w)).unwrap() < smd(&x, d.treatment(), None).unwrap());
}

#[test]
fn association_separates_roles() {
    let (d, _) = labeled(2000, 4);
    let r = association_stats(&d, 10);
    let stat = |j: usize| (r.rows[j].stat_treatment.unwrap(), r.rows[j].stat_outcome.unwrap());
    assert!(r.rows.iter().all(|v| v.kind == CovariateKind::Continuous));
    let (t0, o0) = stat(0);
    assert!(t0 > 5.0 && o0 > 5.0);
    let (t3, o3) = stat(3);
    assert!(t3 < 3.5 && o3 < 3.5);
    for row in &r.rows {
        for p in [row.p_treatment, row.p_outcome].into_iter().flatten() {
            assert!((0.0..=1.0).contains(&p));
        }
    }
}

#[test]
fn association_is_permutation_invariant() {
    let (d, _) = labeled(300, 5);
    let mut perm: Vec<usize> = (0..300).collect();
    perm.reverse();
    perm.rotate_left(37);
    let shuffled = d.subset(&perm).unwrap();
    let (a, b) = (association_stats(&d, 10), association_stats(&shuffled, 10));
    for (x, y) in a.rows.iter().zip(&b.rows) {
        let close = |u: Option<f64>, v: Option<f64>| (u.unwrap() - v.unwrap()).abs() < 1e-9;
        assert!(close(x.stat_treatment, y.stat_treatment) && close(x.stat_outcome, y.stat_outcome));
        assert!(close(x.p_treatment, y.p_treatment) && close(x.p_outcome, y.p_outcome));
    }
}

#[test]
fn discrete_and_undefined_columns() {
    let n = 80;
    let x = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { f64::from(i % 4 == 0) } else { 3.0 });
    let a: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let y: Vec<f64> = (0..n).map(|i| (i % 7) as f64).collect();
    let d = Dataset::new(x, a, y).unwrap();
    let r = association_stats(&d, 10);
    assert_eq!(r.rows[0].kind, CovariateKind::Discrete);
    assert!(r.rows[0].stat_treatment.unwrap() >= 0.0);
    assert!(r.rows[1].stat_treatment.is_none() && r.rows[1].p_outcome.is_none());
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().contains(",NA,"));
}

fn cheap_config() -> EstimateConfig {
    let mut c = EstimateConfig::default();
    c.forest.trees = 30;
    c
}

#[test]
fn bootstrap_of_constant_outcome_is_zero() {
    let (d, _) = labeled(100, 6);
    let d = d.with_outcome(vec![2.5; 100]).unwrap();
    for m in [Method::RfKernelMmd, Method::LogisticIpw] {
        let r = bootstrap_se(&d, m, &cheap_config(), 5, 9).unwrap();
        assert_eq!(r.estimates.len(), 5);
        assert!(r.estimates.iter().all(|e| e.abs() < 1e-12));
        assert!(r.se < 1e-12);
    }
}

#[test]
fn identical_forced_resamples_have_zero_se() {
    let (d, _) = labeled(100, 7);
    let idx: Vec<usize> = (0..100).map(|i| (i * 31) % 100).collect();
    let r = bootstrap_with_indices(&d, Method::LogisticIpw, &cheap_config(), &[idx.clone(), idx]).unwrap();
    assert_eq!(r.se, 0.0);
}

#[test]
fn bootstrap_is_deterministic() {
    let (d, _) = labeled(120, 8);
    let a = bootstrap_se(&d, Method::RfIpw, &cheap_config(), 4, 3).unwrap();
    let b = bootstrap_se(&d, Method::RfIpw, &cheap_config(), 4, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bootstrap_se_tracks_sampling_sd() {
    let n = 500;
    let draw = |seed: u64| {
        let mut rng = stream_rng(seed, 1);
        let x = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let a: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.5).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| x[[i, 0]] + if a[i] { 1.0 } else { 0.0 } + rng.sample::<f64, _>(StandardNormal))
            .collect();
        Dataset::new(x, a, y).unwrap()
    };
    let config = EstimateConfig::default();
    let estimates: Vec<f64> = (0..200)
        .map(|s| confbal::estimate_ate(&draw(100 + s), Method::LogisticIpw, &config).unwrap().tau_hat)
        .collect();
    let m = estimates.iter().sum::<f64>() / 200.0;
    let mc_sd = (estimates.iter().map(|e| (e - m).powi(2)).sum::<f64>() / 199.0).sqrt();
    let boot = bootstrap_se(&draw(1), Method::LogisticIpw, &config, 200, 5).unwrap();
    let ratio = boot.se / mc_sd;
    assert!((1.0 / 1.5..=1.5).contains(&ratio), "bootstrap {} vs monte carlo {}", boot.se, mc_sd);
}
