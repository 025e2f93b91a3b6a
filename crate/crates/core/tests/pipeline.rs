//! End-to-end checks over the public fitting and I/O surface.

use proptest::prelude::*;
use rrmo::estimators::{arm_weights, EstimatorSpec};
use rrmo::io::{read_csv, write_csv, DataSchema};
use rrmo::pipeline::{fit_components, fit_weights, FitOptions, PropensitySource};
use rrmo::simulation::{generate_dgp, sample_dataset};
use rrmo::{standardize, ConstantPolicy, Dataset, PolicyParams, Scalarization, TreatmentPolicy};

fn standardized(n: usize, seed: u64) -> Dataset {
    let params = generate_dgp(5, 4, 2, 1.0, seed).unwrap();
    standardize(&sample_dataset(&params, n, seed + 100).unwrap()).unwrap().0
}

fn options() -> FitOptions {
    FitOptions { rank: Some(2), ..Default::default() }
}

#[test]
fn csv_round_trip_preserves_every_estimate() {
    let data = standardized(150, 1);
    let schema = DataSchema::generic(data.p(), data.k());
    let mut buf = Vec::new();
    write_csv(&data, &schema, &mut buf).unwrap();
    let back = read_csv(buf.as_slice(), &schema).unwrap().assume_standardized();

    let scal = Scalarization::observed(&[1.0, 0.5, -1.0, 2.0]);
    let pol = PolicyParams::new(vec![0.3, -0.2, 0.1, 0.0, 0.4]);
    for spec in EstimatorSpec::standard_set() {
        let a = fit_weights(&spec, &data, &options(), &PropensitySource::Estimated, &scal).unwrap();
        let b = fit_weights(&spec, &back, &options(), &PropensitySource::Estimated, &scal).unwrap();
        let probs = pol.treat_probs(data.covariates()).unwrap();
        assert_eq!(a.value(&probs).unwrap(), b.value(&probs).unwrap(), "{spec}");
    }
}

#[test]
fn cross_fitting_changes_weights_but_stays_close() {
    let data = standardized(400, 2);
    let scal = Scalarization::observed(&[1.0; 4]);
    let spec: EstimatorSpec = "dr:rrr_mu".parse().unwrap();
    let plain = fit_weights(&spec, &data, &options(), &PropensitySource::Estimated, &scal).unwrap();
    let crossed = FitOptions { cross_fit: true, ..options() };
    let cf = fit_weights(&spec, &data, &crossed, &PropensitySource::Estimated, &scal).unwrap();
    assert_ne!(plain.treated, cf.treated);
    let probs = vec![0.5; data.n()];
    let (a, b) = (plain.value(&probs).unwrap(), cf.value(&probs).unwrap());
    assert!((a - b).abs() < 0.2, "{a} vs {b}");
}

#[test]
fn always_and_never_treat_split_the_half_policy() {
    let data = standardized(200, 3);
    let components = fit_components(&data, &options(), &PropensitySource::Estimated).unwrap();
    let scal = Scalarization::observed(&[1.0, -1.0, 0.5, 0.5]);
    for spec in EstimatorSpec::standard_set() {
        let w = arm_weights(&spec, &data, &components, &scal).unwrap();
        let v = |p: ConstantPolicy| w.value(&p.treat_probs(data.covariates()).unwrap()).unwrap();
        let half = v(ConstantPolicy(0.5));
        let mid = 0.5 * (v(ConstantPolicy::ALWAYS_TREAT) + v(ConstantPolicy::NEVER_TREAT));
        assert!((half - mid).abs() < 1e-12, "{spec}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn estimates_are_linear_in_rho(
        seed in 0u64..500,
        r1 in prop::collection::vec(-2.0f64..2.0, 4),
        r2 in prop::collection::vec(-2.0f64..2.0, 4),
        a in -2.0f64..2.0,
    ) {
        let data = standardized(120, seed);
        let components = fit_components(&data, &options(), &PropensitySource::Estimated).unwrap();
        let mix: Vec<f64> = r1.iter().zip(&r2).map(|(x, y)| a * x + y).collect();
        let probs = PolicyParams::new(vec![0.5, 0.0, -0.5, 0.2, 0.1]).treat_probs(data.covariates()).unwrap();
        for spec in EstimatorSpec::standard_set() {
            let v = |rho: &[f64]| {
                arm_weights(&spec, &data, &components, &Scalarization::observed(rho)).unwrap().value(&probs).unwrap()
            };
            let lhs = v(&mix);
            let rhs = a * v(&r1) + v(&r2);
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + rhs.abs()), "{} {} vs {}", spec, lhs, rhs);
        }
    }

    #[test]
    fn negating_outcomes_negates_every_estimate(seed in 0u64..500) {
        let data = standardized(100, seed);
        let neg = data.negate_outcomes();
        let scal = Scalarization::observed(&[1.0, 2.0, -0.5, 0.3]);
        let probs = vec![0.3; data.n()];
        for spec in EstimatorSpec::standard_set() {
            let a = fit_weights(&spec, &data, &options(), &PropensitySource::Estimated, &scal).unwrap();
            let b = fit_weights(&spec, &neg, &options(), &PropensitySource::Estimated, &scal).unwrap();
            let (va, vb) = (a.value(&probs).unwrap(), b.value(&probs).unwrap());
            prop_assert!((va + vb).abs() < 1e-9 * (1.0 + va.abs()), "{} {} vs {}", spec, va, vb);
        }
    }
}
