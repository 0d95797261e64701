use excontrol::dataset::{CompositeDataset, Observation, OutcomeKind};
use excontrol::estimators::{
    estimate, estimate_tau_treated_only, estimate_tau_trial, estimate_with_influence, influence_values, Estimand, Method,
};
use excontrol::nuisance::{fit_nuisances, Family, ModelSpec, NuisanceConfig};
use excontrol::simlab::{generate, Scenario, ScenarioConfig};
use excontrol::{Error, ErrorCode};

fn intercept_only(mut cfg: NuisanceConfig) -> NuisanceConfig {
    cfg.m1 = ModelSpec::intercept_only(Family::Gaussian);
    cfg.m0 = ModelSpec::intercept_only(Family::Gaussian);
    cfg.p = ModelSpec::intercept_only(Family::Binomial);
    cfg.pi = ModelSpec::intercept_only(Family::Binomial);
    cfg
}

fn small() -> CompositeDataset {
    // treated trial y: 3, 5; trial controls: 1, 2, 3; external: 0, 4
    let rows = vec![
        Observation::new(3.0, vec![0.1], true, true),
        Observation::new(1.0, vec![0.4], false, true),
        Observation::new(5.0, vec![-0.3], true, true),
        Observation::new(2.0, vec![0.9], false, true),
        Observation::new(0.0, vec![0.2], false, false),
        Observation::new(3.0, vec![-1.0], false, true),
        Observation::new(4.0, vec![0.5], false, false),
    ];
    CompositeDataset::new(rows, vec!["x".into()], Some(OutcomeKind::Continuous)).unwrap()
}

#[test]
fn trial_estimate_with_constant_models_is_difference_in_means() {
    let ds = small();
    let cfg = intercept_only(NuisanceConfig::for_dataset(&ds));
    let base = fit_nuisances(&ds, &cfg).unwrap().baseline(&ds, &cfg.glm).unwrap();
    let e = estimate_tau_trial(&ds, &base).unwrap();
    assert!((e.point - (4.0 - 2.0)).abs() < 1e-12, "{}", e.point);
    assert_eq!(e.n_used, 5);
    assert_eq!(e.nuisance_fingerprint.len(), 16);
}

#[test]
fn trial_estimate_needs_unpooled_controls() {
    let ds = small();
    let nuis = fit_nuisances(&ds, &NuisanceConfig::for_dataset(&ds)).unwrap();
    let err = estimate_tau_trial(&ds, &nuis).unwrap_err();
    assert_eq!(err.code(), ErrorCode::ConfigError);
}

#[test]
fn treated_only_matches_direct_formula() {
    let rows = vec![
        Observation::new(3.0, vec![0.1], true, true),
        Observation::new(5.0, vec![-0.3], true, true),
        Observation::new(6.0, vec![0.7], true, true),
        Observation::new(0.0, vec![0.2], false, false),
        Observation::new(4.0, vec![0.5], false, false),
    ];
    let ds = CompositeDataset::new(rows, vec!["x".into()], Some(OutcomeKind::Continuous)).unwrap();
    let mut cfg = intercept_only(NuisanceConfig::for_dataset(&ds));
    cfg.treated_only = true;
    let nuis = fit_nuisances(&ds, &cfg).unwrap();
    assert!(nuis.p.is_none() && nuis.m1.is_none());
    let e = estimate_tau_treated_only(&ds, &nuis).unwrap();
    // m0 = external mean 2, and external residuals sum to zero
    assert!((e.point - (14.0 / 3.0 - 2.0)).abs() < 1e-12, "{}", e.point);
}

#[test]
fn treated_only_rejects_trial_controls() {
    let ds = small();
    let mut cfg = NuisanceConfig::for_dataset(&ds);
    cfg.treated_only = true;
    let nuis = fit_nuisances(&ds, &cfg).unwrap();
    match estimate_tau_treated_only(&ds, &nuis) {
        Err(Error::InvariantViolation { row, .. }) => assert_eq!(row, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn full_data_without_external_rows_is_overlap_error() {
    let rows: Vec<_> = small().rows().iter().filter(|r| r.d).cloned().collect();
    let ds = CompositeDataset::new(rows, vec!["x".into()], Some(OutcomeKind::Continuous)).unwrap();
    let nuis = fit_nuisances(&ds, &NuisanceConfig::for_dataset(&ds)).unwrap();
    let err = estimate(&ds, &nuis, Estimand::Tau, Method::FullData).unwrap_err();
    assert_eq!(err.code().as_str(), "OVERLAP_NO_EXTERNAL");
    // the trial-based estimator still works
    let base = nuis.baseline(&ds, &Default::default()).unwrap();
    assert!(estimate_tau_trial(&ds, &base).is_ok());
}

#[test]
fn influence_values_have_mean_zero_and_reject_wrong_points() {
    let (ds, _) = generate(&ScenarioConfig::new(Scenario::I, 400), 3).unwrap();
    let nuis = fit_nuisances(&ds, &NuisanceConfig::for_dataset(&ds)).unwrap();
    for estimand in [Estimand::Tau, Estimand::Psi, Estimand::Xi] {
        let (e, ifv) = estimate_with_influence(&ds, &nuis, estimand, Method::FullData).unwrap();
        assert!(ifv.mean().abs() < 1e-12);
        let again = influence_values(&ds, &nuis, estimand, Method::FullData, e.point).unwrap();
        assert_eq!(again, ifv);
        let err = influence_values(&ds, &nuis, estimand, Method::FullData, e.point + 0.1).unwrap_err();
        assert!(matches!(err, Error::MismatchedPoint { .. }));
    }
}

#[test]
fn full_data_is_more_precise_on_correct_models() {
    // plug-in bounds on one large draw
    let (ds, _) = generate(&ScenarioConfig::new(Scenario::I, 4000), 11).unwrap();
    let nuis = fit_nuisances(&ds, &NuisanceConfig::for_dataset(&ds)).unwrap();
    let base = nuis.baseline(&ds, &Default::default()).unwrap();
    for estimand in [Estimand::Tau, Estimand::Psi, Estimand::Xi] {
        let full = excontrol::estimators::efficiency_bound_plugin(&ds, &nuis, estimand, Method::FullData).unwrap();
        let trial = excontrol::estimators::efficiency_bound_plugin(&ds, &base, estimand, Method::TrialBased).unwrap();
        assert!(full < trial, "{estimand:?}: {full} vs {trial}");
    }
    let gain = excontrol::estimators::efficiency_gain_analytic(&ds, &nuis).unwrap();
    assert!(gain > 0.0);
    assert!(excontrol::estimators::variance_gap_psi(&ds, &nuis).unwrap() > 0.0);
    assert!(excontrol::estimators::variance_gap_xi(&ds, &nuis).unwrap() > 0.0);
}

#[test]
fn binary_outcomes_estimate_in_unit_range() {
    let (cont, _) = generate(&ScenarioConfig::new(Scenario::I, 600), 5).unwrap();
    let rows = cont
        .rows()
        .iter()
        .map(|r| Observation::new(if r.y > 1.0 { 1.0 } else { 0.0 }, r.x.clone(), r.t, r.d))
        .collect();
    let ds = CompositeDataset::new(rows, cont.covariate_names().to_vec(), None).unwrap();
    assert_eq!(ds.outcome_kind(), OutcomeKind::Binary);
    let nuis = fit_nuisances(&ds, &NuisanceConfig::for_dataset(&ds)).unwrap();
    let e = estimate(&ds, &nuis, Estimand::Tau, Method::FullData).unwrap();
    assert!(e.point.abs() < 1.0);
}
