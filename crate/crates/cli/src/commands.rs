use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rrmo::estimators::{arm_weights, CvWeighting, EstimatorSpec};
use rrmo::io::{read_csv_path, DataSchema, ModelBundle, PolicyFile};
use rrmo::pipeline::{choose_rank, fit_components, fit_weights, FitOptions, PropensitySource};
use rrmo::policy_opt::{optimize_policy, OptimizerConfig, PolicyObjective};
use rrmo::simulation::{run_experiment, ExperimentConfig};
use rrmo::{standardize, Dataset, Error, OutcomeSpace, PolicyParams, Result, Scalarization, StandardizationParams};
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::{Command, DataArgs, EvaluateArgs, FitArgs, LearnArgs, SimulateArgs};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(args) => simulate(args),
        Command::Fit(args) => fit(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Learn(args) => learn(args),
    }
}

fn read_config(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("plain data serializes")
}

fn write_file(dir: &Path, name: &str, outputs: &mut Vec<PathBuf>, write: impl FnOnce(&mut fs::File) -> Result<()>) -> Result<()> {
    let path = dir.join(name);
    let mut file = fs::File::create(&path)?;
    write(&mut file)?;
    outputs.push(path);
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let start = Instant::now();
    let bytes = read_config(&args.config)?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut config = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if !args.estimators.is_empty() {
        config.estimators = args.estimators;
    }
    if args.rank.is_some() {
        config.rank = args.rank;
    }
    config.validate()?;

    let out = run_experiment(&config)?;
    create_dir(&args.out_dir)?;
    let mut manifest = RunManifest::new("simulate", &bytes, to_json(&config), config.seed);
    write_file(&args.out_dir, "tidy.csv", &mut manifest.outputs, |f| out.write_tidy_csv(f))?;
    write_file(&args.out_dir, "aggregate.csv", &mut manifest.outputs, |f| out.write_aggregate_csv(f))?;
    manifest.finish(&args.out_dir, start.elapsed())?;
    eprintln!(
        "wrote {} tidy and {} aggregate rows to {} ({} of {} replications skipped)",
        out.tidy.len(),
        out.aggregate.len(),
        args.out_dir.display(),
        out.skipped,
        out.total
    );
    Ok(())
}

/// Raw data plus the (possibly standardized) copy models are fitted on.
struct Prepared {
    schema: DataSchema,
    raw: Dataset,
    data: Dataset,
    standardization: Option<StandardizationParams>,
}

/// Reads a data CSV; an unreadable file is a data error, not a runtime one.
fn read_data(path: &Path, schema: &DataSchema) -> Result<Dataset> {
    read_csv_path(path, schema).map_err(|e| match e {
        Error::Io(io) => Error::Schema(format!("cannot read {}: {io}", path.display())),
        other => other,
    })
}

fn prepare(input: &DataArgs) -> Result<Prepared> {
    let schema = DataSchema::load(&input.schema)?;
    let raw = read_data(&input.data, &schema)?;
    let (data, standardization) = if input.raw {
        (raw.clone(), None)
    } else {
        let (d, s) = standardize(&raw)?;
        (d, Some(s))
    };
    info!("loaded {} rows, {} covariates, {} outcomes", raw.n(), raw.p(), raw.k());
    Ok(Prepared { schema, raw, data, standardization })
}

fn fit_options(input: &DataArgs, cross_fit: bool) -> FitOptions {
    FitOptions {
        rank: input.rank,
        gamma_mode: input.gamma,
        allow_unstandardized: input.raw,
        cross_fit,
        cv_weighting: CvWeighting::default(),
    }
}

fn fit(args: FitArgs) -> Result<()> {
    let start = Instant::now();
    let options = fit_options(&args.input, false);
    let prepared = prepare(&args.input)?;
    let components = fit_components(&prepared.data, &options, &PropensitySource::Estimated)?;
    let bundle = ModelBundle::new(prepared.schema, prepared.standardization, &components, options.gamma_mode)?;

    create_dir(&args.out_dir)?;
    let config = to_json(&options);
    let mut manifest = RunManifest::new("fit", config.to_string().as_bytes(), config, 0);
    let path = args.out_dir.join("model.json");
    bundle.save(&path)?;
    manifest.outputs.push(path);
    manifest.finish(&args.out_dir, start.elapsed())?;
    eprintln!("fitted rank-{} models on {} rows", bundle.rank, prepared.raw.n());
    Ok(())
}

fn scalarization(spec: &EstimatorSpec, rho: &[f64]) -> Scalarization {
    match spec.space() {
        OutcomeSpace::ObservedOutcomes => Scalarization::observed(rho),
        OutcomeSpace::LatentFactors => Scalarization::latent(rho),
    }
}

#[derive(Serialize)]
struct EvaluationRow {
    estimator: String,
    value: f64,
    n: usize,
}

#[derive(Serialize)]
struct EvaluationReport {
    n: usize,
    rho: Vec<f64>,
    results: Vec<EvaluationRow>,
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let bundle = ModelBundle::load(&args.model)?;
    let policy = PolicyFile::load(&args.policy)?;
    let schema = DataSchema::load(&args.schema)?;
    if schema != bundle.schema {
        return Err(Error::Schema("data schema differs from the schema the models were fitted with".into()));
    }
    let raw = read_data(&args.data, &schema)?;
    let data = bundle.prepare(&raw)?;
    let probs = policy.treat_probs_raw(raw.covariates())?;
    let rho = args.rho.unwrap_or_else(|| policy.rho.clone());
    let components = bundle.components(CvWeighting::default());

    let mut results = Vec::with_capacity(args.estimators.len());
    for spec in &args.estimators {
        let weights = arm_weights(spec, &data, &components, &scalarization(spec, &rho))?;
        results.push(EvaluationRow { estimator: spec.to_string(), value: weights.value(&probs)?, n: data.n() });
    }
    let report = EvaluationReport { n: data.n(), rho, results };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

/// Optimizer settings and everything `learn` records about them.
#[derive(Serialize)]
struct LearnConfig<'a> {
    estimator: &'a EstimatorSpec,
    rho: &'a [f64],
    optimizer: &'a OptimizerConfig,
    fit: &'a FitOptions,
}

fn learn(args: LearnArgs) -> Result<()> {
    let start = Instant::now();
    let bytes = match &args.config {
        Some(path) => Some(read_config(path)?),
        None => None,
    };
    let mut optimizer: OptimizerConfig = match &bytes {
        Some(b) => serde_json::from_slice(b).map_err(|e| Error::InvalidConfig(e.to_string()))?,
        None => OptimizerConfig::default(),
    };
    if let Some(sense) = args.sense {
        optimizer.sense = sense;
    }
    if let Some(seed) = args.seed {
        optimizer.seed = seed;
    }
    optimizer.validate()?;
    let options = fit_options(&args.input, args.cross_fit);
    let spec = args.estimator;
    spec.validate(spec.space())?;

    let prepared = prepare(&args.input)?;
    let rho = match args.rho {
        Some(rho) => rho,
        None => match spec.space() {
            OutcomeSpace::ObservedOutcomes => vec![1.0; prepared.data.k()],
            OutcomeSpace::LatentFactors => vec![1.0; choose_rank(&prepared.data, &options)?],
        },
    };
    let scal = scalarization(&spec, &rho).with_sense(optimizer.sense);
    let weights = fit_weights(&spec, &prepared.data, &options, &PropensitySource::Estimated, &scal)?;
    let objective = PolicyObjective::new(weights, prepared.data.covariates().clone())?;

    create_dir(&args.out_dir)?;
    let config = to_json(&LearnConfig { estimator: &spec, rho: &rho, optimizer: &optimizer, fit: &options });
    let digest_bytes = bytes.unwrap_or_else(|| config.to_string().into_bytes());
    let mut manifest = RunManifest::new("learn", &digest_bytes, config, optimizer.seed);

    let (policy, trace) = match optimize_policy(&objective, &optimizer) {
        Ok(result) => result,
        Err(Error::NonFiniteValue { iteration, last_good }) => {
            let last = PolicyParams { theta: last_good.clone(), intercept: optimizer.intercept };
            let path = args.out_dir.join("last_good_theta.json");
            fs::write(&path, serde_json::to_string_pretty(&last)? + "\n")?;
            manifest.outputs.push(path);
            manifest.finish(&args.out_dir, start.elapsed())?;
            return Err(Error::NonFiniteValue { iteration, last_good });
        }
        Err(e) => return Err(e),
    };
    let in_sample_value = *trace.value_path.last().expect("at least one iterate");
    let file = PolicyFile {
        policy,
        standardization: prepared.standardization.clone(),
        estimator: spec,
        rho,
        mode: spec.space(),
        sense: optimizer.sense,
        iterations: optimizer.iterations,
        in_sample_value,
    };
    let policy_path = args.out_dir.join("policy.json");
    file.save(&policy_path)?;
    manifest.outputs.push(policy_path);
    write_file(&args.out_dir, "trace.csv", &mut manifest.outputs, |f| trace.write_csv(f))?;
    manifest.finish(&args.out_dir, start.elapsed())?;
    eprintln!("learned policy after {} iterations; in-sample value {in_sample_value}", optimizer.iterations);
    Ok(())
}
