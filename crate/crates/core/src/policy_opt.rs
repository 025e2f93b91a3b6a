//! Gradient descent on logistic policies.
//!
//! Every estimator value is `(1/n) Σ_i [(1 − π_i) w_{i,0} + π_i w_{i,1}]` with
//! `π_i = σ(θᵀx_i)` and weights that do not depend on `θ`, so the gradient is
//! `(1/n) Σ_i σ'(θᵀx_i) (w_{i,1} − w_{i,0}) x_i` in closed form.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ObjectiveSense, Scalarization};
use crate::error::{Error, Result};
use crate::estimators::{arm_weights, ArmWeights, Components, EstimatorSpec};
use crate::linalg::{sigmoid, Accumulator};
use crate::policy::{PolicyParams, TreatmentPolicy};

/// A policy-value objective frozen at fixed arm weights.
#[derive(Debug, Clone)]
pub struct PolicyObjective {
    weights: ArmWeights,
    covariates: DMatrix<f64>,
}

impl PolicyObjective {
    pub fn new(weights: ArmWeights, covariates: DMatrix<f64>) -> Result<Self> {
        if weights.len() != covariates.nrows() {
            return Err(Error::DimensionMismatch {
                context: "objective weights",
                expected: covariates.nrows(),
                found: weights.len(),
            });
        }
        if weights.is_empty() {
            return Err(Error::Empty);
        }
        Ok(Self { weights, covariates })
    }

    /// Objective of `spec` evaluated on `data`.
    pub fn from_spec(
        spec: &EstimatorSpec,
        data: &Dataset,
        components: &Components,
        scalarization: &Scalarization,
    ) -> Result<Self> {
        let w = arm_weights(spec, data, components, scalarization)?;
        Self::new(w, data.covariates().clone())
    }

    pub fn weights(&self) -> &ArmWeights {
        &self.weights
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn value(&self, policy: &PolicyParams) -> Result<f64> {
        self.weights.value(&policy.treat_probs(&self.covariates)?)
    }

    /// Analytic gradient in `θ`, including the bias slot when present.
    pub fn gradient(&self, policy: &PolicyParams) -> Result<DVector<f64>> {
        let logits = policy.logits(&self.covariates)?;
        let (n, p) = self.covariates.shape();
        let dim = policy.theta.len();
        let mut acc: Vec<Accumulator> = (0..dim).map(|_| Accumulator::for_len(n)).collect();
        for (i, z) in logits.into_iter().enumerate() {
            let s = sigmoid(z);
            let scale = s * (1.0 - s) * (self.weights.treated[i] - self.weights.control[i]);
            for (j, a) in acc.iter_mut().take(p).enumerate() {
                a.add(scale * self.covariates[(i, j)]);
            }
            if policy.intercept {
                acc[p].add(scale);
            }
        }
        Ok(DVector::from_iterator(dim, acc.into_iter().map(|a| a.sum() / n as f64)))
    }
}

/// Gradient of `spec`'s value at `theta`.
pub fn value_gradient(
    spec: &EstimatorSpec,
    theta: &PolicyParams,
    data: &Dataset,
    components: &Components,
    scalarization: &Scalarization,
) -> Result<DVector<f64>> {
    PolicyObjective::from_spec(spec, data, components, scalarization)?.gradient(theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    #[default]
    Zeros,
    SeededGaussian,
}

fn default_learning_rate() -> f64 {
    0.05
}

fn default_iterations() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub init: Init,
    #[serde(default)]
    pub sense: ObjectiveSense,
    /// Adds a trailing bias coefficient to `θ`.
    #[serde(default)]
    pub intercept: bool,
    /// Seed for `seeded_gaussian` initialization.
    #[serde(default)]
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_learning_rate(),
            iterations: default_iterations(),
            init: Init::Zeros,
            sense: ObjectiveSense::Minimize,
            intercept: false,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    fn initial(&self, p: usize) -> PolicyParams {
        let dim = p + usize::from(self.intercept);
        let theta = match self.init {
            Init::Zeros => vec![0.0; dim],
            Init::SeededGaussian => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
            }
        };
        PolicyParams { theta, intercept: self.intercept }
    }
}

/// Every iterate of a run, starting with the initial point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub theta_path: Vec<Vec<f64>>,
    pub value_path: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

impl OptimizationTrace {
    pub fn len(&self) -> usize {
        self.value_path.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value_path.is_empty()
    }

    /// CSV with columns `iteration,value,grad_norm`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "value", "grad_norm"])?;
        for (i, (v, g)) in self.value_path.iter().zip(&self.grad_norms).enumerate() {
            w.write_record([i.to_string(), v.to_string(), g.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs exactly `config.iterations` fixed-step updates, descending when
/// minimizing and ascending when maximizing.
pub fn optimize_policy(objective: &PolicyObjective, config: &OptimizerConfig) -> Result<(PolicyParams, OptimizationTrace)> {
    config.validate()?;
    let mut policy = config.initial(objective.covariates.ncols());
    let step = match config.sense {
        ObjectiveSense::Minimize => -config.learning_rate,
        ObjectiveSense::Maximize => config.learning_rate,
    };
    let mut trace = OptimizationTrace::default();
    let mut last_good = policy.theta.clone();
    for iteration in 0..=config.iterations {
        let value = objective.value(&policy)?;
        let grad = objective.gradient(&policy)?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteValue { iteration, last_good });
        }
        trace.theta_path.push(policy.theta.clone());
        trace.value_path.push(value);
        trace.grad_norms.push(grad.norm());
        last_good = policy.theta.clone();
        if iteration == config.iterations {
            break;
        }
        for (t, g) in policy.theta.iter_mut().zip(grad.iter()) {
            *t += step * g;
        }
        if policy.theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFiniteValue { iteration: iteration + 1, last_good });
        }
    }
    log::debug!(
        "optimized {} iterations, final value {:.6}",
        config.iterations,
        trace.value_path.last().copied().unwrap_or(f64::NAN)
    );
    Ok((policy, trace))
}

/// Fits the objective of `spec` on `data` and optimizes it.
pub fn optimize_spec(
    spec: &EstimatorSpec,
    data: &Dataset,
    components: &Components,
    scalarization: &Scalarization,
    config: &OptimizerConfig,
) -> Result<(PolicyParams, OptimizationTrace)> {
    let objective = PolicyObjective::from_spec(spec, data, components, scalarization)?;
    optimize_policy(&objective, config)
}

/// Probability-scale disagreement `(1/m) Σ (π̂(1|x) − π*(1|x))²`.
pub fn mse_vs_oracle(theta_hat: &PolicyParams, theta_star: &PolicyParams, eval: &DMatrix<f64>) -> Result<f64> {
    let a = theta_hat.treat_probs(eval)?;
    let b = theta_star.treat_probs(eval)?;
    if a.is_empty() {
        return Err(Error::Empty);
    }
    let mut acc = Accumulator::for_len(a.len());
    for (x, y) in a.iter().zip(&b) {
        acc.add((x - y) * (x - y));
    }
    Ok(acc.sum() / a.len() as f64)
}
