//! Treatment policies. The learnable class is logistic in the covariates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Arm;
use crate::error::{Error, Result};
use crate::linalg::sigmoid;

/// Anything that assigns `π(1 | x)` to each covariate row.
pub trait TreatmentPolicy {
    /// `π(1 | X_i)` for every row of `x`.
    fn treat_probs(&self, x: &DMatrix<f64>) -> Result<Vec<f64>>;
}

/// Logistic policy `π(1 | x) = σ(θᵀx)`, optionally with a trailing bias term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
    #[serde(default)]
    pub intercept: bool,
}

impl PolicyParams {
    pub fn new(theta: Vec<f64>) -> Self {
        Self { theta, intercept: false }
    }

    pub fn zeros(p: usize) -> Self {
        Self::new(vec![0.0; p])
    }

    /// Policy with a bias coefficient stored after the `p` slopes.
    pub fn with_intercept(theta: Vec<f64>) -> Self {
        Self { theta, intercept: true }
    }

    /// Number of covariates the policy expects.
    pub fn covariate_dim(&self) -> usize {
        self.theta.len() - usize::from(self.intercept)
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta)
    }

    fn check(&self, p: usize) -> Result<()> {
        if self.covariate_dim() != p {
            return Err(Error::DimensionMismatch {
                context: "policy coefficients",
                expected: p,
                found: self.covariate_dim(),
            });
        }
        Ok(())
    }

    /// `θᵀx` for a single covariate vector.
    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        self.check(x.len())?;
        let slopes = &self.theta[..x.len()];
        let mut z: f64 = slopes.iter().zip(x).map(|(a, b)| a * b).sum();
        if self.intercept {
            z += self.theta[x.len()];
        }
        Ok(z)
    }

    /// Logits for every row.
    pub fn logits(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check(x.ncols())?;
        let p = x.ncols();
        Ok((0..x.nrows())
            .map(|i| {
                let mut z = 0.0;
                for j in 0..p {
                    z += self.theta[j] * x[(i, j)];
                }
                if self.intercept {
                    z += self.theta[p];
                }
                z
            })
            .collect())
    }
}

impl TreatmentPolicy for PolicyParams {
    fn treat_probs(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        Ok(self.logits(x)?.into_iter().map(sigmoid).collect())
    }
}

/// Policy that treats every unit with the same probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantPolicy(pub f64);

impl ConstantPolicy {
    pub const ALWAYS_TREAT: ConstantPolicy = ConstantPolicy(1.0);
    pub const NEVER_TREAT: ConstantPolicy = ConstantPolicy(0.0);
}

impl TreatmentPolicy for ConstantPolicy {
    fn treat_probs(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        Ok(vec![self.0; x.nrows()])
    }
}

/// `π(t | x)` for a logistic policy. Both branches come from one sigmoid
/// evaluation so they sum to one exactly.
pub fn policy_prob(policy: &PolicyParams, x: &[f64], t: Arm) -> Result<f64> {
    let p1 = sigmoid(policy.logit(x)?);
    Ok(if t == 1 { p1 } else { 1.0 - p1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_theta_is_uniform() {
        let pol = PolicyParams::zeros(3);
        assert_eq!(policy_prob(&pol, &[1.0, -2.0, 7.0], 1).unwrap(), 0.5);
        assert_eq!(policy_prob(&pol, &[1.0, -2.0, 7.0], 0).unwrap(), 0.5);
    }

    #[test]
    fn orthogonal_logit_is_half() {
        let pol = PolicyParams::new(vec![1.0, 1.0]);
        assert_eq!(policy_prob(&pol, &[2.0, -2.0], 1).unwrap(), 0.5);
    }

    #[test]
    fn large_logit_saturates_without_overflow() {
        // 1 - σ(40) = e^{-40}/(1 + e^{-40}) ≈ 4.248354255291589e-18
        let pol = PolicyParams::new(vec![40.0]);
        let p1 = policy_prob(&pol, &[1.0], 1).unwrap();
        assert!((1.0 - p1).abs() < 1e-12);
        let p0 = policy_prob(&PolicyParams::new(vec![-40.0]), &[1.0], 1).unwrap();
        assert!((p0 - 4.248354255291589e-18).abs() < 1e-30);
        for z in [-700.0, 700.0] {
            let v = policy_prob(&PolicyParams::new(vec![z]), &[1.0], 1).unwrap();
            assert!(v.is_finite() && (0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn dimension_mismatch() {
        let pol = PolicyParams::zeros(2);
        assert!(matches!(
            policy_prob(&pol, &[1.0], 1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn intercept_term_is_applied() {
        let pol = PolicyParams::with_intercept(vec![0.0, 2.0]);
        assert_eq!(pol.covariate_dim(), 1);
        assert_eq!(pol.logit(&[5.0]).unwrap(), 2.0);
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(theta in prop::collection::vec(-50.0..50.0f64, 3),
                                    x in prop::collection::vec(-10.0..10.0f64, 3)) {
            let pol = PolicyParams::new(theta);
            let p1 = policy_prob(&pol, &x, 1).unwrap();
            let p0 = policy_prob(&pol, &x, 0).unwrap();
            prop_assert_eq!(p0 + p1, 1.0);
            prop_assert!((0.0..=1.0).contains(&p1));
        }
    }
}
