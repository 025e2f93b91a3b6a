//! Replicated experiments on the synthetic model.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    derive_seed, generate_dgp, oracle_optimal_policy, oracle_policy_value, sample_dataset, DgpParams, OracleSpace,
    OracleValue, ORACLE_DRAWS,
};
use crate::data::{OutcomeSpace, Scalarization};
use crate::error::{Error, Result};
use crate::estimators::{arm_weights, ArmModels, Components, EstimatorSpec};
use crate::linalg::mean_var;
use crate::policy::{ConstantPolicy, PolicyParams, TreatmentPolicy};
use crate::policy_opt::{mse_vs_oracle, optimize_policy, OptimizerConfig, PolicyObjective};
use crate::propensity::propensity_fit;
use crate::rrr::GammaMode;

/// Scalarization weights used throughout the synthetic experiments.
pub const DEFAULT_RHO: [f64; 5] = [0.3987, 0.0212, -0.6195, 1.3661, -1.593];

const STREAM_DGP: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_ORACLE: u64 = 3;
const STREAM_PI_STAR: u64 = 4;
const STREAM_TEST: u64 = 5;
const STREAM_RHO: u64 = 6;
const STREAM_REDRAW: u64 = 7;

/// Attempts at a fittable instance per replication when instances are
/// drawn per replication.
pub const MAX_INSTANCE_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Variance,
    PolicyEval,
    PolicyOpt,
}

fn d_p() -> usize {
    8
}
fn d_k() -> usize {
    5
}
fn d_r() -> usize {
    2
}
fn d_noise() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    #[serde(default = "d_p")]
    pub p: usize,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_r")]
    pub r: usize,
    #[serde(default = "d_noise")]
    pub noise_sd: f64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self { p: d_p(), k: d_k(), r: d_r(), noise_sd: d_noise() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Sample size.
    N,
    /// `noise_sd`.
    Noise,
    /// Ratio `k / r` at fixed `r`.
    DimRatio,
    /// Latent dimension `r` at fixed `k`.
    LatentDim,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::N => "n",
            SweepAxis::Noise => "noise",
            SweepAxis::DimRatio => "dim_ratio",
            SweepAxis::LatentDim => "latent_dim",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityMode {
    /// True assignment probabilities, unclipped.
    #[default]
    Known,
    /// Logistic fit on each replication, clipped.
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePolicy {
    AlwaysTreat,
    Uniform,
}

impl ReferencePolicy {
    fn name(self) -> &'static str {
        match self {
            ReferencePolicy::AlwaysTreat => "always_treat",
            ReferencePolicy::Uniform => "uniform",
        }
    }

    fn policy(self) -> ConstantPolicy {
        match self {
            ReferencePolicy::AlwaysTreat => ConstantPolicy::ALWAYS_TREAT,
            ReferencePolicy::Uniform => ConstantPolicy(0.5),
        }
    }
}

fn d_n() -> usize {
    100
}
fn d_replications() -> usize {
    100
}
fn d_rho() -> Vec<f64> {
    DEFAULT_RHO.to_vec()
}
fn d_estimators() -> Vec<EstimatorSpec> {
    let mut specs = EstimatorSpec::standard_set();
    for text in ["dm:rrr_latent", "ipw:rrr_latent", "cv:rrr_latent"] {
        specs.push(text.parse().expect("valid spec"));
    }
    specs
}
fn d_reference() -> Vec<ReferencePolicy> {
    vec![ReferencePolicy::AlwaysTreat, ReferencePolicy::Uniform]
}
fn d_oracle_draws() -> usize {
    ORACLE_DRAWS
}
fn d_sample() -> usize {
    10_000
}
fn d_skip() -> f64 {
    0.01
}

/// Full description of one experiment run. Its JSON keys are the config file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dgp: DgpConfig,
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_replications")]
    pub replications: usize,
    #[serde(default = "d_rho")]
    pub rho: Vec<f64>,
    /// Weights for latent-space estimators; all ones when absent.
    #[serde(default)]
    pub latent_rho: Option<Vec<f64>>,
    #[serde(default = "d_estimators")]
    pub estimators: Vec<EstimatorSpec>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    /// Rank of the fitted reduced-rank models; the true `r` when absent.
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default)]
    pub gamma_mode: GammaMode,
    #[serde(default)]
    pub propensity: PropensityMode,
    /// Fixed policies evaluated by the variance experiment.
    #[serde(default = "d_reference")]
    pub reference_policies: Vec<ReferencePolicy>,
    /// Optimizer for `π*` and learned policies; 20 (evaluation) or 40
    /// (optimization) iterations of step 0.05 when absent.
    #[serde(default)]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default = "d_oracle_draws")]
    pub oracle_draws: usize,
    /// Covariate sample the oracle-optimal policy is trained on.
    #[serde(default = "d_sample")]
    pub oracle_sample: usize,
    /// Out-of-sample covariates for learned-policy evaluation.
    #[serde(default = "d_sample")]
    pub test_n: usize,
    #[serde(default = "d_skip")]
    pub max_skip_fraction: f64,
    /// Draw a fresh covariate mean `M` for every replication, keeping the
    /// loadings and coefficients fixed. Only the policy optimization
    /// experiment supports this; it defaults to on there.
    #[serde(default)]
    pub redraw_mean: Option<bool>,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind) -> Self {
        serde_json::from_value(serde_json::json!({ "experiment": experiment }))
            .expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        self.optimizer.clone().unwrap_or_else(|| OptimizerConfig {
            iterations: if self.experiment == ExperimentKind::PolicyOpt { 40 } else { 20 },
            ..OptimizerConfig::default()
        })
    }

    /// Whether each replication draws its own covariate mean.
    pub fn redraw_mean(&self) -> bool {
        self.redraw_mean.unwrap_or(self.experiment == ExperimentKind::PolicyOpt)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.redraw_mean == Some(true) && self.experiment != ExperimentKind::PolicyOpt {
            return bad("redraw_mean is only supported by the policy_opt experiment".into());
        }
        if self.estimators.is_empty() {
            return bad("estimator list is empty".into());
        }
        if self.replications < 2 {
            return bad(format!("need at least 2 replications, got {}", self.replications));
        }
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if self.rho.iter().chain(self.latent_rho.iter().flatten()).any(|v| !v.is_finite()) {
            return bad("rho must be finite".into());
        }
        if !(0.0..1.0).contains(&self.max_skip_fraction) {
            return bad("max_skip_fraction must lie in [0, 1)".into());
        }
        if self.oracle_draws < 2 || self.oracle_sample == 0 || self.test_n == 0 {
            return bad("oracle_draws, oracle_sample and test_n must be positive".into());
        }
        if self.experiment == ExperimentKind::Variance && self.reference_policies.is_empty() {
            return bad("variance experiment needs at least one reference policy".into());
        }
        for spec in &self.estimators {
            spec.validate(space_of(spec))?;
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return bad("sweep has no values".into());
            }
        }
        self.optimizer().validate()?;
        for point in self.points()? {
            generate_dgp(point.dgp.p, point.dgp.k, point.dgp.r, point.dgp.noise_sd, 0)?;
            if let Some(rank) = self.rank {
                let max = point.dgp.k.min(point.dgp.p);
                if rank == 0 || rank > max {
                    return Err(Error::RankTooLarge { rank, max });
                }
            }
        }
        Ok(())
    }

    fn points(&self) -> Result<Vec<Point>> {
        let Some(sweep) = &self.sweep else {
            return Ok(vec![Point { axis: SweepAxis::N, value: self.n as f64, dgp: self.dgp, n: self.n }]);
        };
        let as_count = |v: f64, what: &str| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::InvalidConfig(format!("{what} sweep value {v} is not a positive integer")))
            }
        };
        sweep
            .values
            .iter()
            .map(|&v| {
                let mut dgp = self.dgp;
                let mut n = self.n;
                match sweep.axis {
                    SweepAxis::N => n = as_count(v, "n")?,
                    SweepAxis::Noise => dgp.noise_sd = v,
                    SweepAxis::DimRatio => dgp.k = as_count(v * dgp.r as f64, "k = ratio·r")?,
                    SweepAxis::LatentDim => dgp.r = as_count(v, "latent_dim")?,
                }
                Ok(Point { axis: sweep.axis, value: v, dgp, n })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Point {
    axis: SweepAxis,
    value: f64,
    dgp: DgpConfig,
    n: usize,
}

fn space_of(spec: &EstimatorSpec) -> OutcomeSpace {
    spec.space()
}

fn oracle_space(mode: OutcomeSpace) -> OracleSpace {
    match mode {
        OutcomeSpace::ObservedOutcomes => OracleSpace::Outcomes,
        OutcomeSpace::LatentFactors => OracleSpace::Latent,
    }
}

/// One row per (sweep value, policy, estimator, replication).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TidyRow {
    pub sweep_axis: &'static str,
    pub sweep_value: f64,
    pub policy: String,
    pub estimator: String,
    pub replication: usize,
    pub value: f64,
    /// Probability-scale disagreement with `π*` (policy optimization only).
    pub mse: Option<f64>,
}

/// Across-replication summary per (sweep value, policy, estimator).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub sweep_axis: &'static str,
    pub sweep_value: f64,
    pub policy: String,
    pub estimator: String,
    pub replications: usize,
    pub skipped: usize,
    pub mean: f64,
    pub variance: f64,
    pub se: f64,
    /// Oracle value of the evaluated policy (of `π*` for policy optimization).
    pub oracle_value: f64,
    pub oracle_se: f64,
    pub mean_mse: Option<f64>,
    pub log_mean_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub tidy: Vec<TidyRow>,
    pub aggregate: Vec<AggregateRow>,
    pub skipped: usize,
    pub total: usize,
    /// Problem instances redrawn because their training data could not be
    /// fitted (per-replication instances only).
    pub redrawn: usize,
}

fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

impl ExperimentOutput {
    pub fn write_tidy_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.tidy)
    }

    pub fn write_aggregate_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.aggregate)
    }

    /// Aggregate row for `(sweep_value, policy, estimator)`.
    pub fn find(&self, sweep_value: f64, policy: &str, estimator: &str) -> Option<&AggregateRow> {
        self.aggregate
            .iter()
            .find(|r| r.sweep_value == sweep_value && r.policy == policy && r.estimator == estimator)
    }
}

/// Fit failures that skip a replication rather than abort the run.
fn is_skippable(e: &Error) -> bool {
    matches!(
        e,
        Error::ArmMissing(_)
            | Error::TooFewRows { .. }
            | Error::SingularDesign
            | Error::SingularCovariance(_)
            | Error::Separation
            | Error::NonConvergence(_)
            | Error::PropensityOutOfRange { .. }
    )
}

/// Everything fixed within one sweep point.
struct Setup {
    point: Point,
    dgp: DgpParams,
    rank: usize,
    rho: Vec<f64>,
    latent_rho: Vec<f64>,
}

impl Setup {
    fn new(config: &ExperimentConfig, point: Point, index: usize) -> Result<Self> {
        let DgpConfig { p, k, r, noise_sd } = point.dgp;
        let dgp = generate_dgp(p, k, r, noise_sd, derive_seed(config.seed, STREAM_DGP, 0))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_RHO, index as u64));
        let mut fit_len = |given: Option<&Vec<f64>>, len: usize, fallback: f64| -> Vec<f64> {
            match given {
                Some(v) if v.len() == len => v.clone(),
                Some(_) => (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                None => vec![fallback; len],
            }
        };
        let rho = fit_len(Some(&config.rho), k, 0.0);
        let latent_rho = fit_len(config.latent_rho.as_ref(), r, 1.0);
        Ok(Self { point, dgp, rank: config.rank.unwrap_or(r), rho, latent_rho })
    }

    fn scalarization(&self, spec: &EstimatorSpec) -> Scalarization {
        match space_of(spec) {
            OutcomeSpace::ObservedOutcomes => Scalarization::observed(&self.rho),
            OutcomeSpace::LatentFactors => Scalarization::latent(&self.latent_rho),
        }
    }

    fn rho_for(&self, mode: OutcomeSpace) -> &[f64] {
        match mode {
            OutcomeSpace::ObservedOutcomes => &self.rho,
            OutcomeSpace::LatentFactors => &self.latent_rho,
        }
    }

    fn components(&self, config: &ExperimentConfig, rep: usize) -> Result<(crate::data::Dataset, Components)> {
        self.components_on(&self.dgp, config, derive_seed(config.seed, STREAM_DATA, rep as u64))
    }

    fn components_on(
        &self,
        dgp: &DgpParams,
        config: &ExperimentConfig,
        data_seed: u64,
    ) -> Result<(crate::data::Dataset, Components)> {
        let data = sample_dataset(dgp, self.point.n, data_seed)?;
        let propensity = match config.propensity {
            PropensityMode::Known => dgp.true_propensity(),
            PropensityMode::Estimated => propensity_fit(&data)?,
        };
        let mut models = ArmModels::fit(&data, Some(self.rank), config.gamma_mode)?;
        // Latent factors are only identified up to an invertible map; express
        // them in the true basis whenever the loadings make that possible.
        if self.rank == dgp.r && dgp.a.iter().all(full_column_rank) {
            models.align_latent(&dgp.a)?;
        }
        Ok((data, Components::new(propensity, models)))
    }

    /// Problem instance and dataset seed of replication `rep`; attempts
    /// after the first redraw both.
    fn instance(&self, config: &ExperimentConfig, rep: usize, attempt: usize) -> Result<(DgpParams, u64)> {
        let data_seed = derive_seed(config.seed, STREAM_DATA, rep as u64);
        if !config.redraw_mean() {
            return Ok((self.dgp.clone(), data_seed));
        }
        let mean_seed = derive_seed(config.seed, STREAM_DGP, 1 + rep as u64);
        let (mean_seed, data_seed) = match attempt {
            0 => (mean_seed, data_seed),
            a => (derive_seed(mean_seed, STREAM_REDRAW, a as u64), derive_seed(data_seed, STREAM_REDRAW, a as u64)),
        };
        Ok((self.dgp.with_redrawn_mean(mean_seed), data_seed))
    }

    fn oracle(&self, config: &ExperimentConfig, policy: &dyn TreatmentPolicy, mode: OutcomeSpace) -> Result<OracleValue> {
        oracle_policy_value(
            &self.dgp,
            policy,
            self.rho_for(mode),
            oracle_space(mode),
            config.oracle_draws,
            derive_seed(config.seed, STREAM_ORACLE, 0),
        )
    }

    fn pi_star_on(&self, dgp: &DgpParams, config: &ExperimentConfig, mode: OutcomeSpace, index: u64) -> Result<PolicyParams> {
        oracle_optimal_policy(
            dgp,
            self.rho_for(mode),
            oracle_space(mode),
            &config.optimizer(),
            config.oracle_sample,
            derive_seed(config.seed, STREAM_PI_STAR, index),
        )
    }
}

fn full_column_rank(a: &nalgebra::DMatrix<f64>) -> bool {
    let sv = a.clone().svd(false, false).singular_values;
    sv.max() > 0.0 && sv.min() > 1e-10 * sv.max()
}

/// Results of one replication, indexed by cell.
struct RepOut {
    values: Vec<f64>,
    mse: Vec<Option<f64>>,
    /// Per-replication oracle values, for cells without a fixed oracle.
    oracle: Vec<f64>,
    /// Instances discarded before this replication could be fitted.
    redraws: usize,
}

impl RepOut {
    fn values(values: Vec<f64>) -> Self {
        let n = values.len();
        Self { values, mse: vec![None; n], oracle: Vec::new(), redraws: 0 }
    }
}

type RepResult = Option<RepOut>;

fn replicate<F>(config: &ExperimentConfig, run: F) -> Result<(Vec<RepResult>, usize)>
where
    F: Fn(usize) -> Result<RepOut> + Sync,
{
    let results: Vec<Result<RepResult>> = (0..config.replications)
        .into_par_iter()
        .map(|rep| match run(rep) {
            Ok(v) => Ok(Some(v)),
            Err(e) if is_skippable(&e) => {
                log::warn!("replication {rep} skipped: {e}");
                Ok(None)
            }
            Err(e) => Err(e),
        })
        .collect();
    let results: Vec<RepResult> = results.into_iter().collect::<Result<_>>()?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    if skipped as f64 > config.max_skip_fraction * config.replications as f64 {
        return Err(Error::TooManySkipped { skipped, total: config.replications });
    }
    Ok((results, skipped))
}

/// Labels and oracle value of each output cell. Without a fixed oracle
/// the cell reports the mean of the per-replication oracle values.
struct Cell {
    policy: String,
    estimator: String,
    oracle: Option<OracleValue>,
}

fn collect(point: &Point, cells: &[Cell], results: &[RepResult], skipped: usize, out: &mut ExperimentOutput) {
    for (c, cell) in cells.iter().enumerate() {
        let mut values = Vec::new();
        let mut mses = Vec::new();
        let mut oracles = Vec::new();
        for (rep, r) in results.iter().enumerate() {
            let Some(r) = r else { continue };
            values.push(r.values[c]);
            if let Some(m) = r.mse[c] {
                mses.push(m);
            }
            if let Some(&o) = r.oracle.get(c) {
                oracles.push(o);
            }
            out.tidy.push(TidyRow {
                sweep_axis: point.axis.name(),
                sweep_value: point.value,
                policy: cell.policy.clone(),
                estimator: cell.estimator.clone(),
                replication: rep,
                value: r.values[c],
                mse: r.mse[c],
            });
        }
        let oracle = cell.oracle.unwrap_or_else(|| {
            let (value, var) = mean_var(&oracles);
            OracleValue { value, se: (var.max(0.0) / oracles.len() as f64).sqrt() }
        });
        let (mean, variance) = mean_var(&values);
        let mean_mse = (!mses.is_empty()).then(|| mean_var(&mses).0);
        out.aggregate.push(AggregateRow {
            sweep_axis: point.axis.name(),
            sweep_value: point.value,
            policy: cell.policy.clone(),
            estimator: cell.estimator.clone(),
            replications: values.len(),
            skipped,
            mean,
            variance,
            se: (variance / values.len() as f64).sqrt(),
            oracle_value: oracle.value,
            oracle_se: oracle.se,
            mean_mse,
            log_mean_mse: mean_mse.map(f64::ln),
        });
    }
    out.skipped += skipped;
    out.total += results.len();
    out.redrawn += results.iter().flatten().map(|r| r.redraws).sum::<usize>();
}

fn run_points<F>(config: &ExperimentConfig, mut point_fn: F) -> Result<ExperimentOutput>
where
    F: FnMut(&Setup, &mut ExperimentOutput) -> Result<()>,
{
    config.validate()?;
    let mut out = ExperimentOutput { tidy: Vec::new(), aggregate: Vec::new(), skipped: 0, total: 0, redrawn: 0 };
    for (index, point) in config.points()?.into_iter().enumerate() {
        let setup = Setup::new(config, point, index)?;
        log::info!("{} = {}: {} replications", point.axis.name(), point.value, config.replications);
        point_fn(&setup, &mut out)?;
    }
    Ok(out)
}

/// Estimates at fixed reference policies, one dataset per replication.
pub fn run_variance_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    run_points(config, |setup, out| {
        let mut cells = Vec::new();
        for policy in &config.reference_policies {
            for spec in &config.estimators {
                let mode = space_of(spec);
                cells.push(Cell {
                    policy: policy.name().into(),
                    estimator: spec.to_string(),
                    oracle: Some(setup.oracle(config, &policy.policy(), mode)?),
                });
            }
        }
        let (results, skipped) = replicate(config, |rep| {
            let (data, comp) = setup.components(config, rep)?;
            let mut values = Vec::with_capacity(cells.len());
            for policy in &config.reference_policies {
                let probs = policy.policy().treat_probs(data.covariates())?;
                for spec in &config.estimators {
                    let w = arm_weights(spec, &data, &comp, &setup.scalarization(spec))?;
                    values.push(w.value(&probs)?);
                }
            }
            Ok(RepOut::values(values))
        })?;
        collect(&setup.point, &cells, &results, skipped, out);
        Ok(())
    })
}

/// Estimates of the oracle-optimal policy's value.
pub fn run_policy_eval_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    run_points(config, |setup, out| {
        let stars = star_policies(config, setup)?;
        let mut cells = Vec::new();
        for spec in &config.estimators {
            let mode = space_of(spec);
            cells.push(Cell {
                policy: "oracle_optimal".into(),
                estimator: spec.to_string(),
                oracle: Some(setup.oracle(config, star_for(&stars, mode), mode)?),
            });
        }
        let (results, skipped) = replicate(config, |rep| {
            let (data, comp) = setup.components(config, rep)?;
            let mut values = Vec::with_capacity(cells.len());
            for spec in &config.estimators {
                let probs = star_for(&stars, space_of(spec)).treat_probs(data.covariates())?;
                let w = arm_weights(spec, &data, &comp, &setup.scalarization(spec))?;
                values.push(w.value(&probs)?);
            }
            Ok(RepOut::values(values))
        })?;
        collect(&setup.point, &cells, &results, skipped, out);
        Ok(())
    })
}

/// `π*` in each space some estimator needs.
fn star_policies(config: &ExperimentConfig, setup: &Setup) -> Result<[Option<PolicyParams>; 2]> {
    star_policies_on(config, setup, &setup.dgp, 0)
}

fn star_policies_on(
    config: &ExperimentConfig,
    setup: &Setup,
    dgp: &DgpParams,
    index: u64,
) -> Result<[Option<PolicyParams>; 2]> {
    let need = |mode| config.estimators.iter().any(|s| space_of(s) == mode);
    let mut out = [None, None];
    for (slot, mode) in out.iter_mut().zip([OutcomeSpace::ObservedOutcomes, OutcomeSpace::LatentFactors]) {
        if need(mode) {
            *slot = Some(setup.pi_star_on(dgp, config, mode, index)?);
        }
    }
    Ok(out)
}

fn star_for(stars: &[Option<PolicyParams>; 2], mode: OutcomeSpace) -> &PolicyParams {
    let i = usize::from(mode == OutcomeSpace::LatentFactors);
    stars[i].as_ref().expect("computed for every needed space")
}

/// Learns a policy per estimator on each training set and scores it with
/// oracle values on fresh covariates.
///
/// With a fresh instance per replication, `π*` is refit for each instance
/// and the reported oracle value is the mean over instances of `π*`'s value
/// on the same test covariates.
pub fn run_policy_opt_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let optimizer = config.optimizer();
    let per_rep = config.redraw_mean();
    run_points(config, |setup, out| {
        let shared = if per_rep { None } else { Some(star_policies(config, setup)?) };
        let mut cells = Vec::new();
        for spec in &config.estimators {
            let mode = space_of(spec);
            let oracle = match &shared {
                Some(stars) => Some(setup.oracle(config, star_for(stars, mode), mode)?),
                None => None,
            };
            cells.push(Cell { policy: "learned".into(), estimator: spec.to_string(), oracle });
        }
        let (results, skipped) = replicate(config, |rep| {
            // A drawn instance can be too unbalanced to fit at this `n`; such
            // draws are replaced rather than skipped when instances vary.
            let attempts = if per_rep { MAX_INSTANCE_ATTEMPTS } else { 1 };
            let mut attempt = 0;
            let (dgp, data, comp) = loop {
                let (dgp, data_seed) = setup.instance(config, rep, attempt)?;
                match setup.components_on(&dgp, config, data_seed) {
                    Ok((data, comp)) => break (dgp, data, comp),
                    Err(e) if is_skippable(&e) && attempt + 1 < attempts => {
                        log::debug!("replication {rep}: redrawing instance after {e}");
                        attempt += 1;
                    }
                    Err(e) => return Err(e),
                }
            };
            let stars = match &shared {
                Some(stars) => stars.clone(),
                None => star_policies_on(config, setup, &dgp, 1 + rep as u64)?,
            };
            let test = dgp.sample_covariates(config.test_n, derive_seed(config.seed, STREAM_TEST, rep as u64));
            let mut values = Vec::with_capacity(cells.len());
            let mut mses = Vec::with_capacity(cells.len());
            let mut oracles = Vec::new();
            for spec in &config.estimators {
                let mode = space_of(spec);
                let star = star_for(&stars, mode);
                let w = arm_weights(spec, &data, &comp, &setup.scalarization(spec))?;
                let objective = PolicyObjective::new(w, data.covariates().clone())?;
                let (theta, _) = optimize_policy(&objective, &optimizer)?;
                let oracle = dgp.oracle_weights(&test, setup.rho_for(mode), oracle_space(mode))?;
                values.push(oracle.value(&theta.treat_probs(&test)?)?);
                mses.push(Some(mse_vs_oracle(&theta, star, &test)?));
                if per_rep {
                    oracles.push(oracle.value(&star.treat_probs(&test)?)?);
                }
            }
            Ok(RepOut { values, mse: mses, oracle: oracles, redraws: attempt })
        })?;
        collect(&setup.point, &cells, &results, skipped, out);
        Ok(())
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    match config.experiment {
        ExperimentKind::Variance => run_variance_experiment(config),
        ExperimentKind::PolicyEval => run_policy_eval_experiment(config),
        ExperimentKind::PolicyOpt => run_policy_opt_experiment(config),
    }
}
