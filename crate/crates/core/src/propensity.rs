//! Logistic propensity model `e_1(x) = σ(βᵀx + b)` with clipping.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::linalg::sigmoid;

pub const DEFAULT_CLIP: f64 = 0.01;
const MAX_ITERATIONS: usize = 500;
const GRAD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub beta: Vec<f64>,
    pub intercept: f64,
    /// Lower clipping bound; `0.0` disables clipping.
    pub clip: f64,
}

impl PropensityModel {
    pub fn new(beta: Vec<f64>, intercept: f64, clip: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&clip) {
            return Err(Error::InvalidConfig(format!("propensity clip {clip} outside [0, 0.5)")));
        }
        Ok(Self { beta, intercept, clip })
    }

    /// Known assignment mechanism (synthetic data) with default clipping.
    pub fn known(beta: &[f64]) -> Self {
        Self {
            beta: beta.to_vec(),
            intercept: 0.0,
            clip: DEFAULT_CLIP,
        }
    }

    pub fn with_clip(mut self, clip: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&clip) {
            return Err(Error::InvalidConfig(format!("propensity clip {clip} outside [0, 0.5)")));
        }
        self.clip = clip;
        Ok(self)
    }

    fn clip_value(&self, row: usize, raw: f64) -> Result<f64> {
        if self.clip > 0.0 {
            Ok(raw.clamp(self.clip, 1.0 - self.clip))
        } else if raw <= 0.0 || raw >= 1.0 {
            Err(Error::PropensityOutOfRange { row, value: raw })
        } else {
            Ok(raw)
        }
    }

    /// `e_1(X_i)` for every row, clipped to `[clip, 1 − clip]`.
    pub fn treat_probs(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.beta.len() {
            return Err(Error::DimensionMismatch {
                context: "propensity coefficients",
                expected: self.beta.len(),
                found: x.ncols(),
            });
        }
        (0..x.nrows())
            .map(|i| {
                let z = self.intercept + (0..x.ncols()).map(|j| self.beta[j] * x[(i, j)]).sum::<f64>();
                self.clip_value(i, sigmoid(z))
            })
            .collect()
    }

    /// `e_t(X_i)` for the given arm. `e_0 = 1 − e_1` exactly.
    pub fn arm_probs(&self, x: &DMatrix<f64>, arm: Arm) -> Result<Vec<f64>> {
        let e1 = self.treat_probs(x)?;
        Ok(if arm == 1 { e1 } else { e1.into_iter().map(|e| 1.0 - e).collect() })
    }
}

fn log_likelihood(design: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> f64 {
    let eta = design * w;
    eta.iter()
        .zip(y.iter())
        .map(|(&z, &t)| {
            // log σ(z) = -softplus(-z), log(1-σ(z)) = -softplus(z)
            let sp = |u: f64| if u > 0.0 { u + (-u).exp().ln_1p() } else { u.exp().ln_1p() };
            if t == 1.0 {
                -sp(-z)
            } else {
                -sp(z)
            }
        })
        .sum()
}

/// Maximum-likelihood logistic regression of `T` on `X` with an intercept,
/// fitted by damped Newton steps.
pub fn propensity_fit(data: &Dataset) -> Result<PropensityModel> {
    data.require_both_arms()?;
    let n = data.n();
    let p = data.p();
    let mut design = DMatrix::from_element(n, p + 1, 1.0);
    design.view_mut((0, 0), (n, p)).copy_from(data.covariates());
    let y = DVector::from_iterator(n, data.treatments().iter().map(|&t| t as f64));
    let mut w = DVector::zeros(p + 1);
    let mut ll = log_likelihood(&design, &y, &w);

    for _ in 0..MAX_ITERATIONS {
        let probs = (&design * &w).map(sigmoid);
        let grad = design.transpose() * (&y - &probs);
        if grad.norm() < GRAD_TOL {
            let beta = w.rows(0, p).iter().copied().collect();
            return Ok(PropensityModel {
                beta,
                intercept: w[p],
                clip: DEFAULT_CLIP,
            });
        }
        let mut weighted = design.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= probs[i] * (1.0 - probs[i]);
        }
        let hessian = design.transpose() * weighted;
        let step = match hessian.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => return Err(Error::Separation),
        };
        let mut scale = 1.0;
        loop {
            let candidate = &w + &step * scale;
            let cand_ll = log_likelihood(&design, &y, &candidate);
            if cand_ll >= ll - 1e-12 * ll.abs() {
                w = candidate;
                ll = cand_ll;
                break;
            }
            scale *= 0.5;
            if scale < 1e-10 {
                return Err(Error::NonConvergence(MAX_ITERATIONS));
            }
        }
        // likelihood approaching 1 with growing coefficients means the arms
        // are separable
        if ll > -1e-6 || w.norm() > 1e6 {
            return Err(Error::Separation);
        }
    }
    Err(Error::NonConvergence(MAX_ITERATIONS))
}
