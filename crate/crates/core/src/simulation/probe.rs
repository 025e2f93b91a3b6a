//! Convergence of the estimated control-variate weights.
//!
//! The reference weights `D*` use the true latent basis `h_t = B_t x` and the
//! true latent targets `ρᵀB_{T_i}x_i`, solved on a large sample. `D̂_n` is the
//! same regression with the fitted (aligned) basis and targets on `n` units.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, generate_dgp, sample_dataset, DgpConfig, DgpParams};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{build_control_variates, control_variates_from_parts, source_values, ArmModels, CvTarget, Latent, Source};
use crate::linalg::mean_var;
use crate::rrr::GammaMode;

const STREAM_PROBE_DGP: u64 = 11;
const STREAM_PROBE_ORACLE: u64 = 12;
const STREAM_PROBE_DATA: u64 = 13;

fn d_ns() -> Vec<usize> {
    vec![500, 2_000, 8_000, 32_000]
}
fn d_reps() -> usize {
    10
}
fn d_oracle_n() -> usize {
    200_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "d_ns")]
    pub ns: Vec<usize>,
    /// Datasets averaged per sample size.
    #[serde(default = "d_reps")]
    pub replications: usize,
    #[serde(default = "d_oracle_n")]
    pub oracle_n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dgp: DgpConfig,
    /// Latent weights; all ones when absent.
    #[serde(default)]
    pub latent_rho: Option<Vec<f64>>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub n: usize,
    pub replications: usize,
    /// Mean of `‖D̂_n − D*‖` over replications (both arms stacked).
    pub mean_error: f64,
    pub sd_error: f64,
}

fn stacked(blocks: [DVector<f64>; 2]) -> DVector<f64> {
    let [a, b] = blocks;
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// Regression weights built from the true latent structure on `data`.
pub fn oracle_regression_weights(params: &DgpParams, data: &Dataset, latent_rho: &[f64]) -> Result<[DVector<f64>; 2]> {
    let rho = DVector::from_column_slice(latent_rho);
    let oracle = params.oracle_latent_models();
    let source = source_values(&Source::Model([&oracle[0], &oracle[1]]), &rho, data)?;
    let e1 = params.true_propensity().treat_probs(data.covariates())?;
    let mut out = Vec::with_capacity(2);
    for arm in [0u8, 1] {
        let e: Vec<f64> = if arm == 1 { e1.clone() } else { e1.iter().map(|e| 1.0 - e).collect() };
        let h = data.covariates() * params.b[usize::from(arm)].transpose();
        out.push(control_variates_from_parts(&e, data.treatments(), arm, h, &source)?.dvec);
    }
    Ok([out[0].clone(), out[1].clone()])
}

/// Regression weights from models fitted on `data`, aligned to the true loadings.
fn fitted_regression_weights(params: &DgpParams, data: &Dataset, latent_rho: &[f64]) -> Result<[DVector<f64>; 2]> {
    let mut models = ArmModels::fit(data, Some(params.r), GammaMode::ResidualPrecision)?;
    models.align_latent(&params.a)?;
    let rrr = models.rrr()?;
    let rho = DVector::from_column_slice(latent_rho);
    let source = source_values(&Source::Model([&Latent(&rrr[0]), &Latent(&rrr[1])]), &rho, data)?;
    let prop = params.true_propensity();
    let d0 = build_control_variates(&prop, data, 0, CvTarget::BhatX, &models, &source)?.dvec;
    let d1 = build_control_variates(&prop, data, 1, CvTarget::BhatX, &models, &source)?.dvec;
    Ok([d0, d1])
}

/// `‖D̂_n − D*‖` averaged over replications for each `n`.
pub fn dhat_consistency_probe(config: &ProbeConfig) -> Result<Vec<ProbeRow>> {
    if config.ns.is_empty() || config.replications == 0 {
        return Err(Error::InvalidConfig("probe needs sample sizes and replications".into()));
    }
    let DgpConfig { p, k, r, noise_sd } = config.dgp;
    let params = generate_dgp(p, k, r, noise_sd, derive_seed(config.seed, STREAM_PROBE_DGP, 0))?;
    let rho = match &config.latent_rho {
        Some(v) if v.len() == r => v.clone(),
        Some(v) => return Err(Error::DimensionMismatch { context: "latent weights", expected: r, found: v.len() }),
        None => vec![1.0; r],
    };
    let big = sample_dataset(&params, config.oracle_n, derive_seed(config.seed, STREAM_PROBE_ORACLE, 0))?;
    let star = stacked(oracle_regression_weights(&params, &big, &rho)?);
    drop(big);

    config
        .ns
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let errors: Vec<f64> = (0..config.replications)
                .into_par_iter()
                .map(|rep| {
                    let seed = derive_seed(config.seed, STREAM_PROBE_DATA, (i * config.replications + rep) as u64);
                    let data = sample_dataset(&params, n, seed)?;
                    Ok((stacked(fitted_regression_weights(&params, &data, &rho)?) - &star).norm())
                })
                .collect::<Result<_>>()?;
            let (mean_error, var) = mean_var(&errors);
            Ok(ProbeRow { n, replications: errors.len(), mean_error, sd_error: var.max(0.0).sqrt() })
        })
        .collect()
}

/// Least-squares slope of `ln(error)` on `ln(n)`.
pub fn log_log_slope(rows: &[ProbeRow]) -> f64 {
    let xs: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_error.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}
