//! Scalarized policy-value estimators.
//!
//! Every estimator here has the form
//! `V̂(π) = (1/n) Σ_i Σ_t π(t | X_i) · w_{i,t}` with per-unit arm weights
//! `w` that do not depend on the policy. [`ArmWeights`] holds those
//! weights; the estimator families differ only in how they are built:
//!
//! | family | `w_{i,t}` |
//! |--------|-----------|
//! | DM     | `ρᵀμ_t(X_i)` |
//! | IPW    | `1[T_i=t] s_i / e_t(X_i)` |
//! | DR     | `1[T_i=t] (ρᵀY_i − ρᵀμ_t(X_i)) / e_t(X_i) + ρᵀμ_t(X_i)` |
//! | CV     | IPW weight `+ D_tᵀ C_{t,i}` |
//!
//! where `s_i` is the scalarized outcome source of the observed arm
//! (`ρᵀY_i`, `ρᵀμ̂_{T_i}(X_i)` or `ρᵀẐ_{T_i,i}`).

mod control_variates;
mod spec;

pub use control_variates::{build_control_variates, control_variates_from_parts, regression_weights, ControlVariateBlock, CvWeighting};
pub use spec::{CvTarget, EstimatorSpec, Family, OutcomeSource};

use nalgebra::{DMatrix, DVector};

use crate::data::{Arm, Dataset, Scalarization};
use crate::error::{Error, Result};
use crate::linalg::Accumulator;
use crate::policy::TreatmentPolicy;
use crate::propensity::PropensityModel;
use crate::rrr::{fit_ols, fit_rrr, FullRankModel, GammaMode, RrrModel};

/// Maps covariate rows to per-arm predictions in the scalarization's space.
pub trait OutcomePredictor: Sync {
    fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

impl OutcomePredictor for FullRankModel {
    fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        FullRankModel::predict(self, x)
    }
}

impl OutcomePredictor for RrrModel {
    fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.predict_outcomes(x)
    }
}

/// Latent-factor view `B̂x` of a reduced-rank model.
pub struct Latent<'a>(pub &'a RrrModel);

impl OutcomePredictor for Latent<'_> {
    fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.0.predict_latent(x)
    }
}

/// Fixed linear map `x ↦ Cx`; used for oracle models with known coefficients.
#[derive(Debug, Clone)]
pub struct LinearOutcome {
    /// `d × p`
    pub coef: DMatrix<f64>,
}

impl OutcomePredictor for LinearOutcome {
    fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.coef.ncols() {
            return Err(Error::DimensionMismatch {
                context: "linear outcome covariates",
                expected: self.coef.ncols(),
                found: x.ncols(),
            });
        }
        Ok(x * self.coef.transpose())
    }
}

/// Per-arm outcome regressions fitted on one sample.
#[derive(Debug, Clone)]
pub struct ArmModels {
    pub ols: [FullRankModel; 2],
    pub rrr: Option<[RrrModel; 2]>,
}

impl ArmModels {
    /// Fits OLS for both arms and, when `rank` is given, reduced-rank models.
    pub fn fit(data: &Dataset, rank: Option<usize>, gamma_mode: GammaMode) -> Result<Self> {
        data.require_both_arms()?;
        let (x0, y0) = data.arm_rows(0);
        let (x1, y1) = data.arm_rows(1);
        let ols = [fit_ols(&x0, &y0)?, fit_ols(&x1, &y1)?];
        let rrr = match rank {
            Some(r) => Some([fit_rrr(&x0, &y0, r, gamma_mode)?, fit_rrr(&x1, &y1, r, gamma_mode)?]),
            None => None,
        };
        Ok(Self { ols, rrr })
    }

    pub fn rrr(&self) -> Result<&[RrrModel; 2]> {
        self.rrr.as_ref().ok_or(Error::ModelMissingForArm(0))
    }

    pub fn rank(&self) -> Option<usize> {
        self.rrr.as_ref().map(|m| m[0].rank)
    }

    /// Re-expresses both latent bases in the coordinates of known loadings.
    pub fn align_latent(&mut self, loadings: &[DMatrix<f64>; 2]) -> Result<()> {
        if let Some(models) = self.rrr.as_mut() {
            for (m, a) in models.iter_mut().zip(loadings) {
                *m = m.align_to_loadings(a)?;
            }
        }
        Ok(())
    }
}

/// Outcome source for weighting estimators.
pub enum Source<'a> {
    /// Observed `ρᵀY_i`.
    Observed,
    /// Model prediction for the observed arm, `ρᵀm_{T_i}(X_i)`.
    Model([&'a dyn OutcomePredictor; 2]),
}

/// Policy-independent arm weights `w_{i,0}`, `w_{i,1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmWeights {
    pub control: Vec<f64>,
    pub treated: Vec<f64>,
}

impl ArmWeights {
    pub fn len(&self) -> usize {
        self.control.len()
    }

    pub fn is_empty(&self) -> bool {
        self.control.is_empty()
    }

    pub fn arm(&self, arm: Arm) -> &[f64] {
        if arm == 1 {
            &self.treated
        } else {
            &self.control
        }
    }

    /// `(1/n) Σ_i [(1 − π_i) w_{i,0} + π_i w_{i,1}]`, summed by unit then arm.
    pub fn value(&self, treat_probs: &[f64]) -> Result<f64> {
        let n = self.len();
        if treat_probs.len() != n {
            return Err(Error::DimensionMismatch {
                context: "policy probabilities",
                expected: n,
                found: treat_probs.len(),
            });
        }
        let mut acc = Accumulator::for_len(n);
        for i in 0..n {
            let p1 = treat_probs[i];
            acc.add((1.0 - p1) * self.control[i]);
            acc.add(p1 * self.treated[i]);
        }
        Ok(acc.sum() / n as f64)
    }

    pub fn negate(&self) -> ArmWeights {
        ArmWeights {
            control: self.control.iter().map(|v| -v).collect(),
            treated: self.treated.iter().map(|v| -v).collect(),
        }
    }
}

fn scalarize(m: &DMatrix<f64>, rho: &DVector<f64>) -> Result<Vec<f64>> {
    if m.ncols() != rho.len() {
        return Err(Error::DimensionMismatch {
            context: "scalarization weights",
            expected: m.ncols(),
            found: rho.len(),
        });
    }
    Ok((m * rho).iter().copied().collect())
}

/// `ρᵀm_t(X_i)` for both arms.
pub fn scalarized_predictions(
    models: [&dyn OutcomePredictor; 2],
    rho: &DVector<f64>,
    x: &DMatrix<f64>,
) -> Result<[Vec<f64>; 2]> {
    Ok([scalarize(&models[0].predict(x)?, rho)?, scalarize(&models[1].predict(x)?, rho)?])
}

/// Scalarized source value `s_i` for the observed arm of every unit.
pub fn source_values(source: &Source<'_>, rho: &DVector<f64>, data: &Dataset) -> Result<Vec<f64>> {
    match source {
        Source::Observed => scalarize(data.outcomes(), rho),
        Source::Model(models) => {
            let [s0, s1] = scalarized_predictions(*models, rho, data.covariates())?;
            Ok(data
                .treatments()
                .iter()
                .enumerate()
                .map(|(i, &t)| if t == 1 { s1[i] } else { s0[i] })
                .collect())
        }
    }
}

pub fn dm_weights(models: [&dyn OutcomePredictor; 2], rho: &DVector<f64>, x: &DMatrix<f64>) -> Result<ArmWeights> {
    let [control, treated] = scalarized_predictions(models, rho, x)?;
    Ok(ArmWeights { control, treated })
}

/// `e_1(X_i)` with the propensity model's clipping.
pub fn treatment_propensities(propensity: &PropensityModel, data: &Dataset) -> Result<Vec<f64>> {
    propensity.treat_probs(data.covariates())
}

pub fn ipw_weights(e1: &[f64], treatments: &[Arm], source: &[f64]) -> ArmWeights {
    let n = treatments.len();
    let mut control = vec![0.0; n];
    let mut treated = vec![0.0; n];
    for i in 0..n {
        if treatments[i] == 1 {
            treated[i] = source[i] / e1[i];
        } else {
            control[i] = source[i] / (1.0 - e1[i]);
        }
    }
    ArmWeights { control, treated }
}

pub fn dr_weights(e1: &[f64], treatments: &[Arm], observed: &[f64], predicted: &[Vec<f64>; 2]) -> ArmWeights {
    let n = treatments.len();
    let mut control = predicted[0].clone();
    let mut treated = predicted[1].clone();
    for i in 0..n {
        if treatments[i] == 1 {
            treated[i] += (observed[i] - predicted[1][i]) / e1[i];
        } else {
            control[i] += (observed[i] - predicted[0][i]) / (1.0 - e1[i]);
        }
    }
    ArmWeights { control, treated }
}

/// Adds the control-variate corrections `D_tᵀC_{t,i}` to IPW weights.
pub fn cv_weights(ipw: &ArmWeights, blocks: &[ControlVariateBlock; 2], weighting: CvWeighting) -> Result<ArmWeights> {
    let mut out = ipw.clone();
    for block in blocks {
        if block.cmat.nrows() != ipw.len() {
            return Err(Error::DimensionMismatch {
                context: "control-variate rows",
                expected: ipw.len(),
                found: block.cmat.nrows(),
            });
        }
        let correction = block.corrections(weighting);
        let target = if block.arm == 1 { &mut out.treated } else { &mut out.control };
        for (w, c) in target.iter_mut().zip(correction.iter()) {
            *w += c;
        }
    }
    Ok(out)
}

/// Direct method: `(1/n) Σ_i Σ_t π(t|X_i) ρᵀm_t(X_i)`.
pub fn dm_value(
    policy: &dyn TreatmentPolicy,
    models: [&dyn OutcomePredictor; 2],
    rho: &DVector<f64>,
    x: &DMatrix<f64>,
) -> Result<f64> {
    dm_weights(models, rho, x)?.value(&policy.treat_probs(x)?)
}

/// Inverse propensity weighting with observed or denoised outcomes.
pub fn ipw_value(
    policy: &dyn TreatmentPolicy,
    propensity: &PropensityModel,
    rho: &DVector<f64>,
    data: &Dataset,
    source: &Source<'_>,
) -> Result<f64> {
    let e1 = treatment_propensities(propensity, data)?;
    let s = source_values(source, rho, data)?;
    ipw_weights(&e1, data.treatments(), &s).value(&policy.treat_probs(data.covariates())?)
}

/// Doubly robust estimator with observed outcomes and an outcome model.
pub fn dr_value(
    policy: &dyn TreatmentPolicy,
    propensity: &PropensityModel,
    models: [&dyn OutcomePredictor; 2],
    rho: &DVector<f64>,
    data: &Dataset,
) -> Result<f64> {
    let e1 = treatment_propensities(propensity, data)?;
    let observed = source_values(&Source::Observed, rho, data)?;
    let predicted = scalarized_predictions(models, rho, data.covariates())?;
    dr_weights(&e1, data.treatments(), &observed, &predicted).value(&policy.treat_probs(data.covariates())?)
}

/// Control-variate estimator: IPW core plus `π(t|X_i) D_tᵀC_{t,i}`.
pub fn cv_value(
    policy: &dyn TreatmentPolicy,
    propensity: &PropensityModel,
    rho: &DVector<f64>,
    data: &Dataset,
    blocks: &[ControlVariateBlock; 2],
    source: &Source<'_>,
    weighting: CvWeighting,
) -> Result<f64> {
    let e1 = treatment_propensities(propensity, data)?;
    let s = source_values(source, rho, data)?;
    let ipw = ipw_weights(&e1, data.treatments(), &s);
    cv_weights(&ipw, blocks, weighting)?.value(&policy.treat_probs(data.covariates())?)
}

/// Fitted pieces every estimator draws from.
#[derive(Debug, Clone)]
pub struct Components {
    pub propensity: PropensityModel,
    pub models: ArmModels,
    pub cv_weighting: CvWeighting,
}

impl Components {
    /// Components with the default (leave-one-out) control-variate weighting.
    pub fn new(propensity: PropensityModel, models: ArmModels) -> Self {
        Self { propensity, models, cv_weighting: CvWeighting::default() }
    }
}

fn source_for<'a>(spec: &EstimatorSpec, models: &'a ArmModels, latent: &'a Option<[Latent<'a>; 2]>) -> Result<Source<'a>> {
    Ok(match spec.source {
        OutcomeSource::ObservedY => Source::Observed,
        OutcomeSource::OlsMu => Source::Model([&models.ols[0], &models.ols[1]]),
        OutcomeSource::RrrMu => {
            let rrr = models.rrr()?;
            Source::Model([&rrr[0], &rrr[1]])
        }
        OutcomeSource::RrrLatent => {
            let l = latent.as_ref().ok_or(Error::ModelMissingForArm(0))?;
            Source::Model([&l[0], &l[1]])
        }
    })
}

/// Arm weights of `spec` on `data`, with every model already fitted.
pub fn arm_weights(
    spec: &EstimatorSpec,
    data: &Dataset,
    components: &Components,
    scalarization: &Scalarization,
) -> Result<ArmWeights> {
    spec.validate(scalarization.mode)?;
    scalarization.check_dim(data.k(), components.models.rank())?;
    let rho = &scalarization.rho;
    let models = &components.models;
    let latent = models.rrr.as_ref().map(|[a, b]| [Latent(a), Latent(b)]);
    let source = source_for(spec, models, &latent)?;

    match spec.family {
        Family::Dm => match source {
            Source::Model(m) => dm_weights(m, rho, data.covariates()),
            Source::Observed => Err(Error::InvalidSpec("direct method needs an outcome model".into())),
        },
        Family::Ipw => {
            let e1 = treatment_propensities(&components.propensity, data)?;
            let s = source_values(&source, rho, data)?;
            Ok(ipw_weights(&e1, data.treatments(), &s))
        }
        Family::Dr => {
            let Source::Model(m) = source else {
                return Err(Error::InvalidSpec("doubly robust needs an outcome model".into()));
            };
            let e1 = treatment_propensities(&components.propensity, data)?;
            let observed = source_values(&Source::Observed, rho, data)?;
            let predicted = scalarized_predictions(m, rho, data.covariates())?;
            Ok(dr_weights(&e1, data.treatments(), &observed, &predicted))
        }
        Family::Cv => {
            let e1 = treatment_propensities(&components.propensity, data)?;
            let s = source_values(&source, rho, data)?;
            let ipw = ipw_weights(&e1, data.treatments(), &s);
            let blocks = [
                build_control_variates(&components.propensity, data, 0, spec.cv_target, models, &s)?,
                build_control_variates(&components.propensity, data, 1, spec.cv_target, models, &s)?,
            ];
            cv_weights(&ipw, &blocks, components.cv_weighting)
        }
    }
}

/// Value of `policy` under `spec`.
pub fn estimate(
    spec: &EstimatorSpec,
    policy: &dyn TreatmentPolicy,
    data: &Dataset,
    components: &Components,
    scalarization: &Scalarization,
) -> Result<f64> {
    arm_weights(spec, data, components, scalarization)?.value(&policy.treat_probs(data.covariates())?)
}
