//! Synthetic low-rank outcome model and experiment harness.
//!
//! Potential outcomes follow `Y(t) = A_t (B_t X + U_t) + ε_t` with
//! `X ~ N(M, I_p)` and logistic assignment `P(T = 1 | X) = σ(βᵀX)`.

mod experiment;
mod probe;

pub use experiment::{
    run_experiment, run_policy_eval_experiment, run_policy_opt_experiment, run_variance_experiment, AggregateRow,
    DgpConfig, ExperimentConfig, ExperimentKind, ExperimentOutput, PropensityMode, ReferencePolicy, Sweep, SweepAxis,
    TidyRow, DEFAULT_RHO,
};
pub use probe::{dhat_consistency_probe, log_log_slope, oracle_regression_weights, ProbeConfig, ProbeRow};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, ObjectiveSense};
use crate::error::{Error, Result};
use crate::estimators::{ArmWeights, LinearOutcome};
use crate::linalg::{mean_var, sigmoid};
use crate::policy::{PolicyParams, TreatmentPolicy};
use crate::policy_opt::{optimize_policy, OptimizerConfig, PolicyObjective};
use crate::propensity::PropensityModel;

/// Mixes `(master, stream, index)` into an independent 64-bit seed
/// (SplitMix64 finalizer applied twice).
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(master ^ mix(stream)) ^ index)
}

/// Which outcome space an oracle value refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleSpace {
    /// `ρᵀA_tB_tx`.
    Outcomes,
    /// `ρᵀB_tx`.
    Latent,
}

/// Parameters of one synthetic instance.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpParams {
    pub p: usize,
    pub k: usize,
    pub r: usize,
    /// Covariate means `M`.
    pub mean: Vec<f64>,
    /// Propensity coefficients `β` (no intercept).
    pub beta: Vec<f64>,
    /// Loadings `A_t`, k×r.
    pub a: [DMatrix<f64>; 2],
    /// Latent maps `B_t`, r×p.
    pub b: [DMatrix<f64>; 2],
    /// Scale of both `ε` and `U`.
    pub noise_sd: f64,
    pub seed: u64,
}

/// Draws `M, β, A_t, B_t` deterministically from `seed`.
pub fn generate_dgp(p: usize, k: usize, r: usize, noise_sd: f64, seed: u64) -> Result<DgpParams> {
    if r == 0 {
        return Err(Error::InvalidConfig("latent dimension must be at least 1".into()));
    }
    if r > k.min(p) {
        return Err(Error::RankTooLarge { rank: r, max: k.min(p) });
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise_sd must be non-negative, got {noise_sd}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let mean: Vec<f64> = (0..p).map(|_| normal()).collect();
    let scale = 1.0 / (p as f64).sqrt();
    let beta: Vec<f64> = (0..p).map(|_| normal() * scale).collect();
    let mut draw = |rows: usize, cols: usize| {
        let v: Vec<f64> = (0..rows * cols).map(|_| normal()).collect();
        DMatrix::from_row_slice(rows, cols, &v)
    };
    let a0 = draw(k, r);
    let b0 = draw(r, p);
    let a1 = draw(k, r);
    let b1 = draw(r, p);
    Ok(DgpParams { p, k, r, mean, beta, a: [a0, a1], b: [b0, b1], noise_sd, seed })
}

impl DgpParams {
    /// Same instance with a fresh covariate mean `M ~ N(0, I)` drawn from `seed`.
    pub fn with_redrawn_mean(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean = (0..self.p).map(|_| rng.sample(StandardNormal)).collect();
        Self { mean, ..self.clone() }
    }

    /// True coefficient `A_tB_t` (k×p).
    pub fn coefficient(&self, arm: usize) -> DMatrix<f64> {
        &self.a[arm] * &self.b[arm]
    }

    /// Oracle outcome models for the observed space.
    pub fn oracle_models(&self) -> [LinearOutcome; 2] {
        [0, 1].map(|t| LinearOutcome { coef: self.coefficient(t) })
    }

    /// Oracle latent models `x ↦ B_tx`.
    pub fn oracle_latent_models(&self) -> [LinearOutcome; 2] {
        [0, 1].map(|t| LinearOutcome { coef: self.b[t].clone() })
    }

    /// The true assignment model, without clipping.
    pub fn true_propensity(&self) -> PropensityModel {
        PropensityModel::known(&self.beta)
            .with_clip(0.0)
            .expect("zero clip is valid")
    }

    /// `c_t` with `ρᵀ(true mean of arm t at x) = c_tᵀx`.
    fn linear_values(&self, rho: &[f64], space: OracleSpace) -> Result<[DVector<f64>; 2]> {
        let dim = match space {
            OracleSpace::Outcomes => self.k,
            OracleSpace::Latent => self.r,
        };
        if rho.len() != dim {
            return Err(Error::DimensionMismatch { context: "oracle weights", expected: dim, found: rho.len() });
        }
        let rho = DVector::from_column_slice(rho);
        Ok([0, 1].map(|t| match space {
            OracleSpace::Outcomes => self.coefficient(t).transpose() * &rho,
            OracleSpace::Latent => self.b[t].transpose() * &rho,
        }))
    }

    /// `m` covariate draws from `N(M, I)`.
    pub fn sample_covariates(&self, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::zeros(m, self.p);
        for i in 0..m {
            for j in 0..self.p {
                x[(i, j)] = self.mean[j] + rng.sample::<f64, _>(StandardNormal);
            }
        }
        x
    }

    /// Oracle arm weights `w_{i,t} = ρᵀ(true mean of arm t at X_i)` on `x`.
    pub fn oracle_weights(&self, x: &DMatrix<f64>, rho: &[f64], space: OracleSpace) -> Result<ArmWeights> {
        let [c0, c1] = self.linear_values(rho, space)?;
        Ok(ArmWeights {
            control: (x * c0).iter().copied().collect(),
            treated: (x * c1).iter().copied().collect(),
        })
    }
}

/// Draws `n` units. Every unit consumes the same random stream regardless of
/// `noise_sd`, so datasets at different noise levels share their draws.
pub fn sample_dataset(params: &DgpParams, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Empty);
    }
    let (p, k, r) = (params.p, params.k, params.r);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, p);
    let mut t = Vec::with_capacity(n);
    let mut y = DMatrix::zeros(n, k);
    let mut latent = [DMatrix::zeros(n, r), DMatrix::zeros(n, r)];
    let mut potential = [DMatrix::zeros(n, k), DMatrix::zeros(n, k)];
    let mut xi = DVector::zeros(p);
    let mut u = DVector::zeros(r);
    let mut eps = DVector::zeros(k);
    for i in 0..n {
        for j in 0..p {
            xi[j] = params.mean[j] + rng.sample::<f64, _>(StandardNormal);
        }
        let logit: f64 = params.beta.iter().zip(xi.iter()).map(|(b, v)| b * v).sum();
        let arm = u8::from(rng.random::<f64>() < sigmoid(logit));
        for arm_t in 0..2 {
            for v in u.iter_mut() {
                *v = params.noise_sd * rng.sample::<f64, _>(StandardNormal);
            }
            for v in eps.iter_mut() {
                *v = params.noise_sd * rng.sample::<f64, _>(StandardNormal);
            }
            let z = &params.b[arm_t] * &xi + &u;
            let yt = &params.a[arm_t] * &z + &eps;
            latent[arm_t].row_mut(i).copy_from(&z.transpose());
            potential[arm_t].row_mut(i).copy_from(&yt.transpose());
        }
        x.row_mut(i).copy_from(&xi.transpose());
        y.row_mut(i).copy_from(&potential[usize::from(arm)].row(i));
        t.push(arm);
    }
    Dataset::new(x, t, y)?.with_truth(latent, potential)
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleValue {
    pub value: f64,
    pub se: f64,
}

pub const ORACLE_DRAWS: usize = 1_000_000;
const ORACLE_CHUNK: usize = 50_000;

/// `E[Σ_t π(t|X) ρᵀ(true mean of arm t at X)]` over `draws` fresh covariates.
pub fn oracle_policy_value(
    params: &DgpParams,
    policy: &dyn TreatmentPolicy,
    rho: &[f64],
    space: OracleSpace,
    draws: usize,
    seed: u64,
) -> Result<OracleValue> {
    if draws < 2 {
        return Err(Error::InvalidConfig("oracle needs at least two draws".into()));
    }
    let [c0, c1] = params.linear_values(rho, space)?;
    let mut values = Vec::with_capacity(draws);
    let mut chunk = 0;
    while values.len() < draws {
        let m = ORACLE_CHUNK.min(draws - values.len());
        let x = params.sample_covariates(m, derive_seed(seed, 0x0AC1E, chunk));
        let probs = policy.treat_probs(&x)?;
        let v0 = &x * &c0;
        let v1 = &x * &c1;
        values.extend((0..m).map(|i| (1.0 - probs[i]) * v0[i] + probs[i] * v1[i]));
        chunk += 1;
    }
    let (mean, var) = mean_var(&values);
    Ok(OracleValue { value: mean, se: (var / draws as f64).sqrt() })
}

/// Policy optimized on the noise-free objective over `sample` fresh covariates.
pub fn oracle_optimal_policy(
    params: &DgpParams,
    rho: &[f64],
    space: OracleSpace,
    config: &OptimizerConfig,
    sample: usize,
    seed: u64,
) -> Result<PolicyParams> {
    let x = params.sample_covariates(sample, seed);
    let weights = params.oracle_weights(&x, rho, space)?;
    let objective = PolicyObjective::new(weights, x)?;
    Ok(optimize_policy(&objective, config)?.0)
}

/// Default sense of the synthetic outcomes: losses.
pub const SYNTHETIC_SENSE: ObjectiveSense = ObjectiveSense::Minimize;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ConstantPolicy;
    use crate::rrr::fit_ols;

    #[test]
    fn default_shapes() {
        let d = generate_dgp(8, 5, 2, 1.0, 1).unwrap();
        assert_eq!(d.a[0].shape(), (5, 2));
        assert_eq!(d.b[1].shape(), (2, 8));
        assert_eq!(d.mean.len(), 8);
        assert_eq!(d, generate_dgp(8, 5, 2, 1.0, 1).unwrap());
        assert_ne!(d.a[0], generate_dgp(8, 5, 2, 1.0, 2).unwrap().a[0]);
        assert!(matches!(generate_dgp(3, 5, 4, 1.0, 1), Err(Error::RankTooLarge { .. })));
        assert!(generate_dgp(8, 5, 0, 1.0, 1).is_err());
    }

    #[test]
    fn seeds_are_distinct_per_stream_and_index() {
        let mut seen = std::collections::HashSet::new();
        for stream in 0..4 {
            for index in 0..256 {
                assert!(seen.insert(derive_seed(7, stream, index)));
            }
        }
        assert_ne!(derive_seed(1, 0, 0), derive_seed(2, 0, 0));
    }

    #[test]
    fn noiseless_outcomes_lie_in_loading_span() {
        let d = generate_dgp(8, 5, 2, 0.0, 3).unwrap();
        let data = sample_dataset(&d, 50, 4).unwrap();
        let potential = data.potential_outcomes_truth().unwrap();
        for t in 0..2 {
            let exact = data.covariates() * d.coefficient(t).transpose();
            assert!((&potential[t] - &exact).amax() < 1e-12);
            // Y(t) rows are A_t z, so rank ≤ r
            let sv = potential[t].clone().svd(false, false).singular_values;
            assert!(sv[2] < 1e-9 * sv[0]);
        }
    }

    #[test]
    fn observed_outcome_is_potential_outcome_of_assigned_arm() {
        let d = generate_dgp(8, 5, 2, 1.0, 5).unwrap();
        let data = sample_dataset(&d, 30, 6).unwrap();
        let potential = data.potential_outcomes_truth().unwrap();
        for i in 0..30 {
            let t = usize::from(data.treatments()[i]);
            assert_eq!(data.outcomes().row(i), potential[t].row(i));
        }
    }

    #[test]
    fn noise_levels_share_draws() {
        let d1 = generate_dgp(8, 5, 2, 1.0, 5).unwrap();
        let d2 = DgpParams { noise_sd: 2.0, ..d1.clone() };
        let a = sample_dataset(&d1, 40, 9).unwrap();
        let b = sample_dataset(&d2, 40, 9).unwrap();
        assert_eq!(a.covariates(), b.covariates());
        assert_eq!(a.treatments(), b.treatments());
        let signal = a.covariates() * d1.coefficient(1).transpose();
        let na = &a.potential_outcomes_truth().unwrap()[1] - &signal;
        let nb = &b.potential_outcomes_truth().unwrap()[1] - &signal;
        assert!((na * 2.0 - nb).amax() < 1e-10);
    }

    #[test]
    fn covariate_means_converge() {
        let d = generate_dgp(8, 5, 2, 1.0, 10).unwrap();
        let x = d.sample_covariates(100_000, 11);
        for j in 0..8 {
            assert!((x.column(j).mean() - d.mean[j]).abs() < 0.02);
        }
    }

    #[test]
    fn true_propensity_is_recoverable() {
        let d = generate_dgp(8, 5, 2, 1.0, 12).unwrap();
        let data = sample_dataset(&d, 10_000, 13).unwrap();
        let fit = crate::propensity::propensity_fit(&data).unwrap();
        for (b, hat) in d.beta.iter().zip(&fit.beta) {
            assert!((b - hat).abs() < 0.1, "{b} vs {hat}");
        }
    }

    #[test]
    fn oracle_value_shared_arms_closed_form() {
        let mut d = generate_dgp(8, 5, 2, 1.0, 14).unwrap();
        d.a[1] = d.a[0].clone();
        d.b[1] = d.b[0].clone();
        let rho = DEFAULT_RHO.to_vec();
        let v = oracle_policy_value(&d, &PolicyParams::zeros(8), &rho, OracleSpace::Outcomes, 200_000, 1).unwrap();
        let exact = (DVector::from_vec(rho.clone()).transpose() * d.coefficient(0) * DVector::from_vec(d.mean.clone()))[0];
        assert!((v.value - exact).abs() < 4.0 * v.se, "{} vs {exact}", v.value);

        let zero = oracle_policy_value(&d, &PolicyParams::zeros(8), &[0.0; 5], OracleSpace::Outcomes, 1000, 1).unwrap();
        assert_eq!(zero.value, 0.0);
    }

    #[test]
    fn oracle_value_dominant_arm() {
        let d = generate_dgp(8, 5, 2, 1.0, 15).unwrap();
        let rho = DEFAULT_RHO.to_vec();
        let v = oracle_policy_value(&d, &ConstantPolicy::ALWAYS_TREAT, &rho, OracleSpace::Outcomes, 200_000, 2).unwrap();
        let exact = (DVector::from_vec(rho).transpose() * d.coefficient(1) * DVector::from_vec(d.mean.clone()))[0];
        assert!((v.value - exact).abs() < 4.0 * v.se);
        let z = oracle_policy_value(&d, &ConstantPolicy::ALWAYS_TREAT, &[1.0, -1.0], OracleSpace::Latent, 200_000, 2).unwrap();
        let exact = (DMatrix::from_row_slice(1, 2, &[1.0, -1.0]) * &d.b[1] * DVector::from_vec(d.mean.clone()))[0];
        assert!((z.value - exact).abs() < 4.0 * z.se);
    }

    #[test]
    fn oracle_policy_saturates_toward_dominant_arm() {
        // arm 1 has strictly lower loss everywhere: ρᵀA_1B_1x = ρᵀA_0B_0x − 5 on
        // a positive-mean design with one constant-like coordinate.
        let mut d = generate_dgp(3, 2, 1, 1.0, 16).unwrap();
        d.mean = vec![20.0, 0.0, 0.0];
        d.a = [DMatrix::from_element(2, 1, 1.0), DMatrix::from_element(2, 1, 1.0)];
        d.b[0] = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0]);
        d.b[1] = DMatrix::from_row_slice(1, 3, &[-0.25, 1.0, 0.0]);
        let config = OptimizerConfig { iterations: 50, learning_rate: 0.01, ..Default::default() };
        let star = oracle_optimal_policy(&d, &[1.0, 1.0], OracleSpace::Outcomes, &config, 2000, 3).unwrap();
        let x = d.sample_covariates(2000, 4);
        let probs = star.treat_probs(&x).unwrap();
        assert!(probs.iter().all(|p| *p > 0.99));
        assert_eq!(crate::policy_opt::mse_vs_oracle(&star, &star, &x).unwrap(), 0.0);
    }

    #[test]
    fn oracle_policy_golden_is_reproducible() {
        let d = generate_dgp(8, 5, 2, 1.0, 2024).unwrap();
        let config = OptimizerConfig::default();
        let a = oracle_optimal_policy(&d, &DEFAULT_RHO, OracleSpace::Outcomes, &config, 10_000, 7).unwrap();
        let b = oracle_optimal_policy(&d, &DEFAULT_RHO, OracleSpace::Outcomes, &config, 10_000, 7).unwrap();
        assert_eq!(a, b);
        let golden: Vec<f64> = serde_json::from_str(include_str!("../../tests/data/oracle_theta.json")).unwrap();
        assert_eq!(golden.len(), a.theta.len());
        for (g, t) in golden.iter().zip(&a.theta) {
            assert!((g - t).abs() < 1e-9, "{g} vs {t}");
        }
    }

    #[test]
    fn oracle_models_fit_noiseless_data() {
        let d = generate_dgp(8, 5, 2, 0.0, 17).unwrap();
        let data = sample_dataset(&d, 200, 18).unwrap();
        let (x, y) = data.arm_rows(1);
        let ols = fit_ols(&x, &y).unwrap();
        assert!((&ols.coef - d.coefficient(1)).amax() < 1e-8);
    }
}
