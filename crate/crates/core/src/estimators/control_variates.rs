//! Outcome control variates `C_t = (1 − 1[T=t]/e_t(X)) h_t(X)` and their
//! regression weights.
//!
//! `E[C_t | X] = 0` whenever `e_t` is the true propensity, so any linear
//! combination `D_tᵀC_t` can be added to the IPW integrand without bias.
//! The weights are the least-squares solution of `C_t D_t ≈ −a_t`, where
//! `a_{t,i} = 1[T_i=t] s_i / e_t(X_i)` is the arm's IPW integrand; this
//! minimises the empirical second moment of `a_t + C_t D_t`.
//!
//! Using the in-sample `D̂` for every unit correlates each unit's weight with
//! its own outcome and leaves an `O(1/n)` bias. The default leave-one-out
//! weighting uses `D̂_{−i}` for unit `i`, obtained in closed form from the
//! full fit, which keeps the correction exactly mean-zero under the true
//! propensity.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ArmModels, CvTarget};
use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{lstsq, pseudo_inverse_sym};
use crate::propensity::PropensityModel;
use crate::rrr::fit_ols;

/// Which regression weights multiply unit `i`'s control variates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvWeighting {
    /// `D̂_{−i}`, fitted without unit `i`.
    #[default]
    LeaveOneOut,
    /// The full-sample `D̂` for every unit.
    InSample,
}

/// Per-unit control-variate vectors for one arm and their weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVariateBlock {
    /// `n × q`, row `i` is `C_{t,i}`.
    pub cmat: DMatrix<f64>,
    /// `D_t`, length `q`.
    pub dvec: DVector<f64>,
    /// `n × q`, row `i` is `D̂_{−i}`.
    pub loo: DMatrix<f64>,
    pub arm: Arm,
    /// Set when `CᵀC` was singular and the pseudoinverse was used.
    pub rank_deficient: bool,
}

impl ControlVariateBlock {
    /// Same control variates with the weighting forced to zero.
    pub fn zeroed(&self) -> Self {
        Self {
            dvec: DVector::zeros(self.dvec.len()),
            loo: DMatrix::zeros(self.loo.nrows(), self.loo.ncols()),
            ..self.clone()
        }
    }

    /// `D_tᵀC_{t,i}` for every unit.
    pub fn corrections(&self, weighting: CvWeighting) -> DVector<f64> {
        match weighting {
            CvWeighting::InSample => &self.cmat * &self.dvec,
            CvWeighting::LeaveOneOut => {
                DVector::from_fn(self.cmat.nrows(), |i, _| self.cmat.row(i).dot(&self.loo.row(i)))
            }
        }
    }
}

/// Rows `D̂_{−i} = D̂ − G⁺c_i e_i / (1 − h_ii)` with `G = CᵀC`, residual
/// `e_i = y_i − c_iᵀD̂` and leverage `h_ii = c_iᵀG⁺c_i`. Units whose
/// leverage is numerically one keep the full-sample weights.
fn leave_one_out_weights(cmat: &DMatrix<f64>, targets: &DVector<f64>, dvec: &DVector<f64>) -> DMatrix<f64> {
    let n = cmat.nrows();
    let q = cmat.ncols();
    let ginv = pseudo_inverse_sym(&(cmat.transpose() * cmat));
    let mut out = DMatrix::zeros(n, q);
    for i in 0..n {
        let c = cmat.row(i).transpose();
        let gc = &ginv * &c;
        let leverage = c.dot(&gc);
        let residual = targets[i] - c.dot(dvec);
        let mut row = dvec.clone();
        if 1.0 - leverage > 1e-10 {
            row -= gc * (residual / (1.0 - leverage));
        }
        out.set_row(i, &row.transpose());
    }
    out
}

/// Least-squares `D` with `cmat · D ≈ targets`; pseudoinverse when the Gram
/// matrix is singular. The flag reports the fallback.
pub fn regression_weights(cmat: &DMatrix<f64>, targets: &DVector<f64>) -> (DVector<f64>, bool) {
    lstsq(cmat, targets)
}

/// `h_t(X_i)` for every row.
fn basis(data: &Dataset, arm: Arm, target: CvTarget, models: &ArmModels) -> Result<DMatrix<f64>> {
    let x = data.covariates();
    match target {
        CvTarget::BhatX => models.rrr()?[arm as usize].predict_latent(x),
        CvTarget::MeanY => {
            let n = data.n();
            let mean = data.outcomes().row_mean();
            Ok(DMatrix::from_fn(n, data.k(), |_, j| mean[j]))
        }
        CvTarget::RegYGivenX => fit_ols(x, data.outcomes())?.predict(x),
        CvTarget::RegZhatGivenX => {
            let rrr = models.rrr()?;
            let z0 = rrr[0].predict_latent(x)?;
            let z1 = rrr[1].predict_latent(x)?;
            let observed = DMatrix::from_fn(data.n(), z0.ncols(), |i, j| {
                if data.treatments()[i] == 1 {
                    z1[(i, j)]
                } else {
                    z0[(i, j)]
                }
            });
            fit_ols(x, &observed)?.predict(x)
        }
        CvTarget::RegYGivenTx => models.ols[arm as usize].predict(x),
    }
}

/// Control variates from explicit propensities `e_t(X_i)` and basis rows
/// `h_t(X_i)`.
pub fn control_variates_from_parts(
    arm_propensity: &[f64],
    treatments: &[Arm],
    arm: Arm,
    h: DMatrix<f64>,
    source: &[f64],
) -> Result<ControlVariateBlock> {
    let n = treatments.len();
    for (context, len) in [
        ("control-variate propensities", arm_propensity.len()),
        ("control-variate basis rows", h.nrows()),
        ("control-variate source values", source.len()),
    ] {
        if len != n {
            return Err(Error::DimensionMismatch {
                context,
                expected: n,
                found: len,
            });
        }
    }
    let mut cmat = h;
    let mut integrand = DVector::zeros(n);
    for i in 0..n {
        let observed = treatments[i] == arm;
        let factor = if observed { 1.0 - 1.0 / arm_propensity[i] } else { 1.0 };
        cmat.row_mut(i).scale_mut(factor);
        if observed {
            integrand[i] = -source[i] / arm_propensity[i];
        }
    }
    let (dvec, rank_deficient) = regression_weights(&cmat, &integrand);
    let loo = leave_one_out_weights(&cmat, &integrand, &dvec);
    Ok(ControlVariateBlock {
        cmat,
        dvec,
        loo,
        arm,
        rank_deficient,
    })
}

/// Builds `C_t` for `arm` and regresses the negated IPW integrand of the
/// configured source values `s_i` on it.
pub fn build_control_variates(
    propensity: &PropensityModel,
    data: &Dataset,
    arm: Arm,
    target: CvTarget,
    models: &ArmModels,
    source: &[f64],
) -> Result<ControlVariateBlock> {
    let e = propensity.arm_probs(data.covariates(), arm)?;
    let h = basis(data, arm, target, models)?;
    let block = control_variates_from_parts(&e, data.treatments(), arm, h, source)?;
    if block.rank_deficient {
        warn!("control variates for arm {arm} ({target}) are rank deficient; using pseudoinverse weights");
    }
    Ok(block)
}
