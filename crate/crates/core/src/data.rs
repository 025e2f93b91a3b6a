//! Causal data model: observed tuples `(X, T, Y)`, scalarization weights
//! and standardization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Block, Error, Result};

/// Binary treatment arm.
pub type Arm = u8;

/// Both arms, in the fixed order used for every summation.
pub const ARMS: [Arm; 2] = [0, 1];

/// Observed data plus, for synthetic draws, the ground truth behind it.
#[derive(Debug, Clone)]
pub struct Dataset {
    covariates: DMatrix<f64>,
    treatments: Vec<Arm>,
    outcomes: DMatrix<f64>,
    latent_truth: Option<[DMatrix<f64>; 2]>,
    potential_outcomes_truth: Option<[DMatrix<f64>; 2]>,
    standardized: bool,
}

impl Dataset {
    pub fn new(covariates: DMatrix<f64>, treatments: Vec<Arm>, outcomes: DMatrix<f64>) -> Result<Self> {
        let n = covariates.nrows();
        if n == 0 {
            return Err(Error::Empty);
        }
        if treatments.len() != n {
            return Err(Error::DimensionMismatch {
                context: "treatment vector length",
                expected: n,
                found: treatments.len(),
            });
        }
        if outcomes.nrows() != n {
            return Err(Error::DimensionMismatch {
                context: "outcome row count",
                expected: n,
                found: outcomes.nrows(),
            });
        }
        if let Some(row) = treatments.iter().position(|&t| t > 1) {
            return Err(Error::InvalidTreatment {
                row,
                value: treatments[row] as f64,
            });
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("covariates"));
        }
        if outcomes.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("outcomes"));
        }
        Ok(Self {
            covariates,
            treatments,
            outcomes,
            latent_truth: None,
            potential_outcomes_truth: None,
            standardized: false,
        })
    }

    /// Builds a dataset from a real-valued treatment column, rejecting
    /// anything other than exact 0 or 1.
    pub fn from_treatment_values(covariates: DMatrix<f64>, treatments: &[f64], outcomes: DMatrix<f64>) -> Result<Self> {
        let arms = treatments
            .iter()
            .enumerate()
            .map(|(row, &v)| match v {
                v if v == 0.0 => Ok(0),
                v if v == 1.0 => Ok(1),
                value => Err(Error::InvalidTreatment { row, value }),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(covariates, arms, outcomes)
    }

    /// Attaches synthetic ground truth (per-arm latent factors and potential outcomes).
    pub fn with_truth(mut self, latent: [DMatrix<f64>; 2], potential: [DMatrix<f64>; 2]) -> Result<Self> {
        for m in latent.iter().chain(potential.iter()) {
            if m.nrows() != self.n() {
                return Err(Error::DimensionMismatch {
                    context: "ground-truth row count",
                    expected: self.n(),
                    found: m.nrows(),
                });
            }
        }
        self.latent_truth = Some(latent);
        self.potential_outcomes_truth = Some(potential);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn k(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn treatments(&self) -> &[Arm] {
        &self.treatments
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn latent_truth(&self) -> Option<&[DMatrix<f64>; 2]> {
        self.latent_truth.as_ref()
    }

    pub fn potential_outcomes_truth(&self) -> Option<&[DMatrix<f64>; 2]> {
        self.potential_outcomes_truth.as_ref()
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    pub fn arm_count(&self, arm: Arm) -> usize {
        self.treatments.iter().filter(|&&t| t == arm).count()
    }

    pub fn arm_indices(&self, arm: Arm) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.treatments[i] == arm).collect()
    }

    /// Fails unless both arms have at least one unit.
    pub fn require_both_arms(&self) -> Result<()> {
        for arm in ARMS {
            if self.arm_count(arm) == 0 {
                return Err(Error::ArmMissing(arm));
            }
        }
        Ok(())
    }

    /// Covariate and outcome rows of the units observed under `arm`.
    pub fn arm_rows(&self, arm: Arm) -> (DMatrix<f64>, DMatrix<f64>) {
        let idx = self.arm_indices(arm);
        (self.covariates.select_rows(&idx), self.outcomes.select_rows(&idx))
    }

    /// Rows selected by index, truth included.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let mut out = Dataset::new(
            self.covariates.select_rows(rows),
            rows.iter().map(|&i| self.treatments[i]).collect(),
            self.outcomes.select_rows(rows),
        )?;
        out.latent_truth = self
            .latent_truth
            .as_ref()
            .map(|[a, b]| [a.select_rows(rows), b.select_rows(rows)]);
        out.potential_outcomes_truth = self
            .potential_outcomes_truth
            .as_ref()
            .map(|[a, b]| [a.select_rows(rows), b.select_rows(rows)]);
        out.standardized = self.standardized;
        Ok(out)
    }

    /// Marks the data as already standardized by an external tool.
    pub fn assume_standardized(mut self) -> Self {
        self.standardized = true;
        self
    }

    /// Same dataset with every outcome negated.
    pub fn negate_outcomes(&self) -> Dataset {
        let mut out = self.clone();
        out.outcomes = -&self.outcomes;
        out.potential_outcomes_truth = self.potential_outcomes_truth.as_ref().map(|[a, b]| [-a, -b]);
        out
    }
}

/// Which outcome space a weight vector applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeSpace {
    ObservedOutcomes,
    LatentFactors,
}

/// Direction of the policy objective. Never changes estimator values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveSense {
    #[default]
    Minimize,
    Maximize,
}

impl std::str::FromStr for ObjectiveSense {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" | "minimize" => Ok(Self::Minimize),
            "max" | "maximize" => Ok(Self::Maximize),
            other => Err(Error::InvalidConfig(format!("unknown sense `{other}`"))),
        }
    }
}

/// Weighting `ρ` that collapses vector outcomes into one objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Scalarization {
    pub rho: DVector<f64>,
    pub mode: OutcomeSpace,
    pub sense: ObjectiveSense,
}

impl Scalarization {
    pub fn observed(rho: &[f64]) -> Self {
        Self {
            rho: DVector::from_column_slice(rho),
            mode: OutcomeSpace::ObservedOutcomes,
            sense: ObjectiveSense::Minimize,
        }
    }

    pub fn latent(rho: &[f64]) -> Self {
        Self {
            rho: DVector::from_column_slice(rho),
            mode: OutcomeSpace::LatentFactors,
            sense: ObjectiveSense::Minimize,
        }
    }

    pub fn with_sense(mut self, sense: ObjectiveSense) -> Self {
        self.sense = sense;
        self
    }

    pub fn dim(&self) -> usize {
        self.rho.len()
    }

    /// Checks `ρ` against the outcome dimension of its mode.
    pub fn check_dim(&self, k: usize, r: Option<usize>) -> Result<()> {
        let expected = match self.mode {
            OutcomeSpace::ObservedOutcomes => k,
            OutcomeSpace::LatentFactors => r.ok_or_else(|| {
                Error::InvalidSpec("latent scalarization needs a reduced-rank model".into())
            })?,
        };
        if self.rho.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "scalarization weights",
                expected,
                found: self.rho.len(),
            });
        }
        Ok(())
    }
}

/// Column means and sample standard deviations used by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub covariate_mean: Vec<f64>,
    pub covariate_sd: Vec<f64>,
    pub outcome_mean: Vec<f64>,
    pub outcome_sd: Vec<f64>,
}

fn column_moments(m: &DMatrix<f64>, block: Block) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = m.nrows();
    if n < 2 {
        return Err(Error::ZeroVarianceColumn { block, index: 0 });
    }
    let mut means = Vec::with_capacity(m.ncols());
    let mut sds = Vec::with_capacity(m.ncols());
    for (j, col) in m.column_iter().enumerate() {
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        if !(sd > 1e-300) || sd <= 1e-12 * mean.abs() {
            return Err(Error::ZeroVarianceColumn { block, index: j });
        }
        means.push(mean);
        sds.push(sd);
    }
    Ok((means, sds))
}

fn scale_columns(m: &DMatrix<f64>, mean: &[f64], sd: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.iter_mut().for_each(|v| *v = (*v - mean[j]) / sd[j]);
    }
    out
}

fn unscale_columns(m: &DMatrix<f64>, mean: &[f64], sd: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.iter_mut().for_each(|v| *v = *v * sd[j] + mean[j]);
    }
    out
}

impl StandardizationParams {
    /// Applies stored parameters to new data (e.g. a held-out split).
    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.p() != self.covariate_mean.len() {
            return Err(Error::DimensionMismatch {
                context: "standardization covariates",
                expected: self.covariate_mean.len(),
                found: data.p(),
            });
        }
        if data.k() != self.outcome_mean.len() {
            return Err(Error::DimensionMismatch {
                context: "standardization outcomes",
                expected: self.outcome_mean.len(),
                found: data.k(),
            });
        }
        let mut out = Dataset::new(
            scale_columns(&data.covariates, &self.covariate_mean, &self.covariate_sd),
            data.treatments.clone(),
            scale_columns(&data.outcomes, &self.outcome_mean, &self.outcome_sd),
        )?;
        out.standardized = true;
        Ok(out)
    }

    pub fn inverse_covariates(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        unscale_columns(x, &self.covariate_mean, &self.covariate_sd)
    }

    pub fn inverse_outcomes(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        unscale_columns(y, &self.outcome_mean, &self.outcome_sd)
    }
}

/// Centres every covariate and outcome column and scales it to unit sample
/// (n − 1) variance. Ground truth is dropped since it lives on the raw scale.
pub fn standardize(data: &Dataset) -> Result<(Dataset, StandardizationParams)> {
    let (covariate_mean, covariate_sd) = column_moments(&data.covariates, Block::Covariates)?;
    let (outcome_mean, outcome_sd) = column_moments(&data.outcomes, Block::Outcomes)?;
    let params = StandardizationParams {
        covariate_mean,
        covariate_sd,
        outcome_mean,
        outcome_sd,
    };
    Ok((params.apply(data)?, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 10.0, 2.0, 30.0, 3.0, 20.0]);
        let y = DMatrix::from_row_slice(3, 1, &[0.5, -1.0, 2.0]);
        Dataset::new(x, vec![0, 1, 1], y).unwrap()
    }

    #[test]
    fn standardize_unit_column() {
        let (s, params) = standardize(&toy()).unwrap();
        let col = s.covariates().column(0);
        assert!(col.sum().abs() < 1e-15);
        let var = col.iter().map(|v| v * v).sum::<f64>() / 2.0;
        assert!((var - 1.0).abs() < 1e-14);
        assert_eq!(params.covariate_mean[0], 2.0);
        assert_eq!(params.covariate_sd[0], 1.0);
        assert!(s.is_standardized());
    }

    #[test]
    fn standardize_is_idempotent() {
        let (once, _) = standardize(&toy()).unwrap();
        let (twice, _) = standardize(&once).unwrap();
        assert!((once.covariates() - twice.covariates()).amax() < 1e-12);
        assert!((once.outcomes() - twice.outcomes()).amax() < 1e-12);
    }

    #[test]
    fn constant_column_is_rejected() {
        let x = DMatrix::from_row_slice(3, 2, &[5.0, 1.0, 5.0, 2.0, 5.0, 4.0]);
        let y = DMatrix::from_row_slice(3, 1, &[0.5, -1.0, 2.0]);
        let data = Dataset::new(x, vec![0, 1, 1], y).unwrap();
        match standardize(&data) {
            Err(Error::ZeroVarianceColumn { block: Block::Covariates, index: 0 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inverse_transform_round_trips() {
        let data = toy();
        let (s, params) = standardize(&data).unwrap();
        let back = params.inverse_covariates(s.covariates());
        for (a, b) in back.iter().zip(data.covariates().iter()) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
        let back = params.inverse_outcomes(s.outcomes());
        for (a, b) in back.iter().zip(data.outcomes().iter()) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn validation_errors() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, f64::NAN]);
        let y = DMatrix::zeros(2, 1);
        assert!(matches!(
            Dataset::new(x, vec![0, 1], y.clone()),
            Err(Error::NonFiniteInput("covariates"))
        ));
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        assert!(matches!(
            Dataset::from_treatment_values(x.clone(), &[0.0, 0.5], y.clone()),
            Err(Error::InvalidTreatment { row: 1, .. })
        ));
        let d = Dataset::new(x, vec![1, 1], y).unwrap();
        assert!(matches!(d.require_both_arms(), Err(Error::ArmMissing(0))));
    }

    #[test]
    fn scalarization_dims() {
        let s = Scalarization::observed(&[1.0, 2.0]);
        assert!(s.check_dim(2, None).is_ok());
        assert!(s.check_dim(3, None).is_err());
        let z = Scalarization::latent(&[1.0]);
        assert!(z.check_dim(5, Some(1)).is_ok());
        assert!(z.check_dim(5, None).is_err());
    }
}
