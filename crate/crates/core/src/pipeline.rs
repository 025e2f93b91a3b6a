//! End-to-end fitting on real data: standardization checks, rank choice,
//! propensity handling and optional cross-fitting of the estimator weights.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Scalarization};
use crate::error::{Error, Result};
use crate::estimators::{arm_weights, ArmModels, ArmWeights, Components, CvWeighting, EstimatorSpec};
use crate::propensity::{propensity_fit, PropensityModel};
use crate::rrr::{select_rank, GammaMode};

/// How the models behind an estimator are fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    /// Reduced-rank dimension; chosen by cross-validation when absent.
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default)]
    pub gamma_mode: GammaMode,
    /// Permit raw (unstandardized) inputs.
    #[serde(default)]
    pub allow_unstandardized: bool,
    /// Two-fold cross-fitting by row parity.
    #[serde(default)]
    pub cross_fit: bool,
    #[serde(default)]
    pub cv_weighting: CvWeighting,
}

impl Default for FitOptions {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

/// Where propensities come from.
#[derive(Debug, Clone, PartialEq)]
pub enum PropensitySource {
    /// Logistic regression on the fitting sample.
    Estimated,
    /// A known assignment mechanism.
    Known(PropensityModel),
}

fn check_standardized(data: &Dataset, options: &FitOptions) -> Result<()> {
    if !data.is_standardized() && !options.allow_unstandardized {
        return Err(Error::NotStandardized);
    }
    Ok(())
}

/// Rank used for both arms: the configured one, or the larger of the two
/// per-arm cross-validated choices.
pub fn choose_rank(data: &Dataset, options: &FitOptions) -> Result<usize> {
    let max = data.k().min(data.p());
    if let Some(rank) = options.rank {
        if rank == 0 || rank > max {
            return Err(Error::RankTooLarge { rank, max });
        }
        return Ok(rank);
    }
    data.require_both_arms()?;
    let candidates: Vec<usize> = (1..=max).collect();
    let mut best = 1;
    for arm in [0u8, 1] {
        let (x, y) = data.arm_rows(arm);
        best = best.max(select_rank(&x, &y, &candidates, options.gamma_mode)?);
    }
    log::info!("selected rank {best} by cross-validation");
    Ok(best)
}

/// Propensity model, per-arm OLS and reduced-rank fits on `data`.
pub fn fit_components(data: &Dataset, options: &FitOptions, propensity: &PropensitySource) -> Result<Components> {
    check_standardized(data, options)?;
    let rank = choose_rank(data, options)?;
    let propensity = match propensity {
        PropensitySource::Estimated => propensity_fit(data)?,
        PropensitySource::Known(model) => model.clone(),
    };
    let models = ArmModels::fit(data, Some(rank), options.gamma_mode)?;
    Ok(Components { propensity, models, cv_weighting: options.cv_weighting })
}

/// Row indices of fold `f ∈ {0, 1}` (row parity).
fn fold(n: usize, f: usize) -> Vec<usize> {
    (0..n).filter(|i| i % 2 == f).collect()
}

/// Per-unit estimator weights. Without cross-fitting the models are fitted
/// and applied on all of `data`; with it, each parity fold is weighted by
/// models fitted on the other fold.
pub fn fit_weights(
    spec: &EstimatorSpec,
    data: &Dataset,
    options: &FitOptions,
    propensity: &PropensitySource,
    scalarization: &Scalarization,
) -> Result<ArmWeights> {
    if !options.cross_fit {
        let components = fit_components(data, options, propensity)?;
        return arm_weights(spec, data, &components, scalarization);
    }
    check_standardized(data, options)?;
    let n = data.n();
    let mut out = ArmWeights { control: vec![0.0; n], treated: vec![0.0; n] };
    for f in 0..2 {
        let eval_rows = fold(n, f);
        let train = data.subset(&fold(n, 1 - f))?;
        let eval = data.subset(&eval_rows)?;
        let components = fit_components(&train, options, propensity)?;
        let w = arm_weights(spec, &eval, &components, scalarization)?;
        for (j, &i) in eval_rows.iter().enumerate() {
            out.control[i] = w.control[j];
            out.treated[i] = w.treated[j];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::standardize;
    use crate::policy::PolicyParams;
    use crate::simulation::{generate_dgp, sample_dataset};

    fn standardized(n: usize, seed: u64) -> Dataset {
        let params = generate_dgp(6, 4, 2, 1.0, seed).unwrap();
        standardize(&sample_dataset(&params, n, seed + 1).unwrap()).unwrap().0
    }

    #[test]
    fn raw_data_needs_opt_in() {
        let params = generate_dgp(6, 4, 2, 1.0, 1).unwrap();
        let raw = sample_dataset(&params, 200, 2).unwrap();
        let options = FitOptions { rank: Some(2), ..Default::default() };
        assert!(matches!(
            fit_components(&raw, &options, &PropensitySource::Estimated),
            Err(Error::NotStandardized)
        ));
        let allowed = FitOptions { allow_unstandardized: true, ..options };
        assert!(fit_components(&raw, &allowed, &PropensitySource::Estimated).is_ok());
    }

    #[test]
    fn rank_bounds_and_selection() {
        let data = standardized(400, 3);
        let too_big = FitOptions { rank: Some(5), ..Default::default() };
        assert!(matches!(choose_rank(&data, &too_big), Err(Error::RankTooLarge { rank: 5, max: 4 })));
        let r = choose_rank(&data, &FitOptions::default()).unwrap();
        assert!((1..=4).contains(&r));
    }

    #[test]
    fn noiseless_rank_is_recovered() {
        let params = generate_dgp(6, 4, 2, 0.0, 4).unwrap();
        let data = standardize(&sample_dataset(&params, 300, 5).unwrap()).unwrap().0;
        assert_eq!(choose_rank(&data, &FitOptions::default()).unwrap(), 2);
    }

    #[test]
    fn cross_fit_fills_every_unit_and_differs_from_in_sample() {
        let data = standardized(300, 6);
        let spec: EstimatorSpec = "dm:rrr_mu".parse().unwrap();
        let scal = Scalarization::observed(&[1.0, -0.5, 0.2, 0.3]);
        let base = FitOptions { rank: Some(2), ..Default::default() };
        let plain = fit_weights(&spec, &data, &base, &PropensitySource::Estimated, &scal).unwrap();
        let crossed = FitOptions { cross_fit: true, ..base };
        let cf = fit_weights(&spec, &data, &crossed, &PropensitySource::Estimated, &scal).unwrap();
        assert_eq!(cf.len(), data.n());
        assert!(cf.control.iter().chain(&cf.treated).all(|v| v.is_finite() && *v != 0.0));
        assert_ne!(plain, cf);
        let pol = PolicyParams::zeros(data.p());
        let probs = crate::policy::TreatmentPolicy::treat_probs(&pol, data.covariates()).unwrap();
        let (a, b) = (plain.value(&probs).unwrap(), cf.value(&probs).unwrap());
        assert!((a - b).abs() < 0.5, "{a} vs {b}");
    }

    #[test]
    fn options_json_rejects_unknown_keys() {
        assert!(serde_json::from_str::<FitOptions>(r#"{"rank":2,"bogus":true}"#).is_err());
        let o: FitOptions = serde_json::from_str(r#"{"cv_weighting":"in_sample"}"#).unwrap();
        assert_eq!(o.cv_weighting, CvWeighting::InSample);
    }
}
