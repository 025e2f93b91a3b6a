//! Full-rank and reduced-rank multivariate regression of outcomes on
//! covariates.
//!
//! The reduced-rank fit follows the weighted eigen-construction: with
//! `Γ` a `k × k` weighting, take the top-`r` eigenvectors `V` of
//! `Γ^{1/2} Σ_yx Σ_xx⁻¹ Σ_xy Γ^{1/2}` and set `Â = Γ^{-1/2} V`,
//! `B̂ = Vᵀ Γ^{1/2} Σ_yx Σ_xx⁻¹`. The product `ÂB̂` is the rank-`r`
//! coefficient matrix; `B̂x` are the latent factors.
//!
//! Models are fitted without an intercept; callers are expected to centre
//! the data first.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, ridge_inverse, symmetric_sqrt_pair, symmetrize};

/// Full-rank least-squares fit `Y ≈ X Cᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullRankModel {
    /// `k × p`
    #[serde(with = "linalg::rows")]
    pub coef: DMatrix<f64>,
    pub intercept: Vec<f64>,
    /// `EᵀE / (n − p)` with `E` the in-sample residuals.
    #[serde(with = "linalg::rows")]
    pub residual_cov: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// `Γ` is the inverse OLS residual covariance.
    #[default]
    ResidualPrecision,
    Identity,
}

impl std::str::FromStr for GammaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual_precision" => Ok(Self::ResidualPrecision),
            "identity" => Ok(Self::Identity),
            other => Err(Error::InvalidConfig(format!("unknown gamma mode `{other}`"))),
        }
    }
}

/// Rank-`r` factorisation `C = ÂB̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrrModel {
    /// `k × r`
    #[serde(with = "linalg::rows")]
    pub a_hat: DMatrix<f64>,
    /// `r × p`
    #[serde(with = "linalg::rows")]
    pub b_hat: DMatrix<f64>,
    pub rank: usize,
    pub gamma_mode: GammaMode,
    #[serde(with = "linalg::rows")]
    pub gamma: DMatrix<f64>,
    /// Retained eigenvalues `λ̂²_j`, descending.
    pub eigenvalues: Vec<f64>,
}

fn check_rows(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch {
            context: "regression rows",
            expected: x.nrows(),
            found: y.nrows(),
        });
    }
    if x.nrows() <= x.ncols() {
        return Err(Error::TooFewRows { n: x.nrows(), p: x.ncols() });
    }
    Ok(())
}

/// Coefficients `C` (`k × p`) minimising `‖Y − X Cᵀ‖_F`.
fn least_squares_coef(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = x.ncols();
    let qr = x.clone().qr();
    let r = qr.r();
    let diag_max = (0..p).fold(0.0_f64, |m, i| m.max(r[(i, i)].abs()));
    let diag_min = (0..p).fold(f64::INFINITY, |m, i| m.min(r[(i, i)].abs()));
    // cond(XᵀX) ≈ cond(R)², so 1e6 here corresponds to 1e12 on the Gram matrix
    if diag_max > 0.0 && diag_min > 1e-6 * diag_max {
        let qty = qr.q().transpose() * y;
        if let Some(sol) = r.solve_upper_triangular(&qty) {
            return Ok(sol.transpose());
        }
    }
    let mut gram = x.transpose() * x;
    let eps = 1e-8 * gram.trace() / p as f64;
    if !(eps > 0.0) {
        return Err(Error::SingularDesign);
    }
    for i in 0..p {
        gram[(i, i)] += eps;
    }
    let chol = gram.cholesky().ok_or(Error::SingularDesign)?;
    let sol = chol.solve(&(x.transpose() * y));
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularDesign);
    }
    Ok(sol.transpose())
}

/// Ordinary least squares of every outcome column on `X`, without intercept.
pub fn fit_ols(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<FullRankModel> {
    check_rows(x, y)?;
    let coef = least_squares_coef(x, y)?;
    let resid = y - x * coef.transpose();
    let dof = (x.nrows() - x.ncols()) as f64;
    let residual_cov = symmetrize(&(resid.transpose() * &resid / dof));
    Ok(FullRankModel {
        intercept: vec![0.0; y.ncols()],
        coef,
        residual_cov,
    })
}

impl FullRankModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.coef.ncols() {
            return Err(Error::DimensionMismatch {
                context: "OLS prediction covariates",
                expected: self.coef.ncols(),
                found: x.ncols(),
            });
        }
        let mut out = x * self.coef.transpose();
        for mut row in out.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(&self.intercept) {
                *v += b;
            }
        }
        Ok(out)
    }
}

/// Reduced-rank regression of `Y` on `X` at rank `r`.
pub fn fit_rrr(x: &DMatrix<f64>, y: &DMatrix<f64>, rank: usize, gamma_mode: GammaMode) -> Result<RrrModel> {
    let k = y.ncols();
    let p = x.ncols();
    let max = k.min(p);
    if rank == 0 || rank > max {
        return Err(Error::RankTooLarge { rank, max });
    }
    check_rows(x, y)?;
    let ols = fit_ols(x, y)?;
    let n = x.nrows() as f64;

    let gamma = match gamma_mode {
        GammaMode::Identity => DMatrix::identity(k, k),
        GammaMode::ResidualPrecision => {
            ridge_inverse(&ols.residual_cov).ok_or(Error::SingularCovariance("residual"))?
        }
    };
    let (gamma_half, gamma_inv_half) = symmetric_sqrt_pair(&gamma);

    // Σ_yx Σ_xx⁻¹ is the OLS coefficient, so the target reduces to
    // Γ^{1/2} C Σ_xx Cᵀ Γ^{1/2}.
    let sxx = x.transpose() * x / n;
    let target = symmetrize(&(&gamma_half * &ols.coef * sxx * ols.coef.transpose() * &gamma_half));
    let eig = SymmetricEigen::new(target);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut v = DMatrix::zeros(k, rank);
    let mut eigenvalues = Vec::with_capacity(rank);
    for (j, &idx) in order.iter().take(rank).enumerate() {
        let mut col: DVector<f64> = eig.eigenvectors.column(idx).into_owned();
        let lead = col.iter().copied().fold(0.0_f64, |m, c| if c.abs() > m.abs() { c } else { m });
        if lead < 0.0 {
            col.neg_mut();
        }
        v.set_column(j, &col);
        eigenvalues.push(eig.eigenvalues[idx].max(0.0));
    }

    let a_hat = &gamma_inv_half * &v;
    let b_hat = v.transpose() * &gamma_half * &ols.coef;
    Ok(RrrModel {
        a_hat,
        b_hat,
        rank,
        gamma_mode,
        gamma,
        eigenvalues,
    })
}

impl RrrModel {
    pub fn k(&self) -> usize {
        self.a_hat.nrows()
    }

    pub fn p(&self) -> usize {
        self.b_hat.ncols()
    }

    /// `ÂB̂` (`k × p`).
    pub fn coefficient(&self) -> DMatrix<f64> {
        &self.a_hat * &self.b_hat
    }

    /// Latent factors `Ẑ = X B̂ᵀ` (`m × r`).
    pub fn predict_latent(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.p() {
            return Err(Error::DimensionMismatch {
                context: "RRR prediction covariates",
                expected: self.p(),
                found: x.ncols(),
            });
        }
        Ok(x * self.b_hat.transpose())
    }

    /// Denoised outcomes `Ẑ Âᵀ` (`m × k`).
    pub fn predict_outcomes(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.predict_latent(x)? * self.a_hat.transpose())
    }

    /// Same product `ÂB̂` expressed in another latent basis: `Â G⁻¹`, `G B̂`.
    ///
    /// The returned model no longer satisfies the `Γ^{1/2}Â` orthonormality
    /// of a fresh fit.
    pub fn reparameterize(&self, g: &DMatrix<f64>) -> Result<RrrModel> {
        if g.nrows() != self.rank || g.ncols() != self.rank {
            return Err(Error::DimensionMismatch {
                context: "latent basis change",
                expected: self.rank,
                found: g.nrows(),
            });
        }
        let g_inv = g.clone().try_inverse().ok_or(Error::SingularCovariance("latent basis"))?;
        Ok(RrrModel {
            a_hat: &self.a_hat * g_inv,
            b_hat: g * &self.b_hat,
            ..self.clone()
        })
    }

    /// Expresses the latent factors in the basis of known loadings `A`
    /// (`k × r`), i.e. `Ẑ ↦ A⁺ ÂẐ`.
    pub fn align_to_loadings(&self, loadings: &DMatrix<f64>) -> Result<RrrModel> {
        if loadings.nrows() != self.k() || loadings.ncols() != self.rank {
            return Err(Error::DimensionMismatch {
                context: "reference loadings",
                expected: self.k(),
                found: loadings.nrows(),
            });
        }
        let pinv = loadings
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|_| Error::SingularCovariance("reference loadings"))?;
        self.reparameterize(&(pinv * &self.a_hat))
    }
}

/// Number of folds used by [`select_rank`].
pub const RANK_FOLDS: usize = 5;

/// Picks the candidate rank with the smallest mean held-out squared error
/// under 5-fold cross-validation. Row `i` belongs to fold `i % 5`. Errors
/// within a relative `1e-9` of the best count as ties and go to the
/// smaller rank.
pub fn select_rank(x: &DMatrix<f64>, y: &DMatrix<f64>, candidates: &[usize], gamma_mode: GammaMode) -> Result<usize> {
    check_rows(x, y)?;
    let max = y.ncols().min(x.ncols());
    let mut ranks = candidates.to_vec();
    ranks.sort_unstable();
    ranks.dedup();
    if ranks.is_empty() {
        return Err(Error::InvalidConfig("no candidate ranks".into()));
    }
    if let Some(&bad) = ranks.iter().find(|&&r| r == 0 || r > max) {
        return Err(Error::RankTooLarge { rank: bad, max });
    }
    let n = x.nrows();
    let folds: Vec<(Vec<usize>, Vec<usize>)> = (0..RANK_FOLDS)
        .map(|f| (0..n).partition(|i| i % RANK_FOLDS != f))
        .collect();
    let scale = y.norm_squared() / n as f64;
    let mut errors = Vec::with_capacity(ranks.len());
    for &r in &ranks {
        let mut sse = 0.0;
        for (train, test) in &folds {
            let model = fit_rrr(&x.select_rows(train), &y.select_rows(train), r, gamma_mode)?;
            let pred = model.predict_outcomes(&x.select_rows(test))?;
            sse += (y.select_rows(test) - pred).norm_squared();
        }
        errors.push(sse / n as f64);
    }
    let best = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * best + 1e-12 * scale;
    let pick = ranks
        .iter()
        .zip(&errors)
        .find(|(_, &e)| e <= best + tol)
        .map(|(&r, _)| r)
        .expect("non-empty candidates");
    Ok(pick)
}
