use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;
use rrmo::io::{write_csv, DataSchema, ModelBundle, PolicyFile};
use rrmo::pipeline::{fit_components, FitOptions, PropensitySource};
use rrmo::simulation::{generate_dgp, sample_dataset};
use rrmo::{standardize, Dataset};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn rrmo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rrmo")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes `data` and a generic schema into `dir`.
fn dump(dir: &Path, data: &Dataset) -> (PathBuf, PathBuf) {
    let schema = DataSchema::generic(data.p(), data.k());
    let csv = dir.join("data.csv");
    write_csv(data, &schema, fs::File::create(&csv).unwrap()).unwrap();
    let schema_path = dir.join("schema.json");
    fs::write(&schema_path, serde_json::to_string(&schema).unwrap()).unwrap();
    (csv, schema_path)
}

fn synthetic(dir: &Path, n: usize, seed: u64) -> (Dataset, PathBuf, PathBuf) {
    let params = generate_dgp(6, 4, 2, 1.0, seed).unwrap();
    let data = sample_dataset(&params, n, seed + 1).unwrap();
    let (csv, schema) = dump(dir, &data);
    (data, csv, schema)
}

fn write_json(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn empty_estimator_list_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(dir.path(), "c.json", r#"{"experiment":"variance","estimators":[]}"#);
    let out = rrmo(&["simulate", "--config", s(&cfg), "--out-dir", s(&dir.path().join("out"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn malformed_config_and_missing_file_exit_2() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(dir.path(), "c.json", r#"{"experiment":"variance","n":"#);
    let out = rrmo(&["simulate", "--config", s(&cfg), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 2);
    let out = rrmo(&["simulate", "--config", "/nonexistent.json", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn bundled_variance_config_is_deterministic_across_threads() {
    let dir = TempDir::new().unwrap();
    let config = workspace_file("configs/variance.json");
    let mut aggregates = Vec::new();
    for threads in ["1", "4"] {
        let out_dir = dir.path().join(format!("t{threads}"));
        let out = rrmo(&["simulate", "--config", s(&config), "--threads", threads, "--out-dir", s(&out_dir)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        aggregates.push(fs::read(out_dir.join("aggregate.csv")).unwrap());

        let tidy = fs::read_to_string(out_dir.join("tidy.csv")).unwrap();
        let mut rdr = csv::Reader::from_reader(tidy.as_bytes());
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        let cell = |r: &csv::StringRecord| (r[2].to_string(), r[3].to_string());
        let first = cell(&rows[0]);
        assert_eq!(rows.iter().filter(|r| cell(r) == first).count(), 100);

        let manifests: Vec<_> = fs::read_dir(&out_dir)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with("manifest"))
            .collect();
        assert_eq!(manifests.len(), 1);
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
        let digest = hex::encode(Sha256::digest(fs::read(&config).unwrap()));
        assert_eq!(manifest["config_digest"], digest);
        assert_eq!(manifest["command"], "simulate");
        assert_eq!(manifest["seed"], 1);
    }
    assert_eq!(aggregates[0], aggregates[1]);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(
        dir.path(),
        "c.json",
        r#"{"experiment":"variance","replications":5,"oracle_draws":1000,"estimators":["ipw:observed_y"],"seed":1}"#,
    );
    let run = |seed: &str, name: &str| {
        let out_dir = dir.path().join(name);
        let out = rrmo(&["simulate", "--config", s(&cfg), "--seed", seed, "--out-dir", s(&out_dir)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        fs::read(out_dir.join("aggregate.csv")).unwrap()
    };
    assert_eq!(run("1", "a"), run("1", "b"));
    assert_ne!(run("1", "c"), run("2", "d"));
}

#[test]
fn fit_round_trips_against_in_memory_fit() {
    let dir = TempDir::new().unwrap();
    let (data, csv, schema) = synthetic(dir.path(), 300, 21);
    let out_dir = dir.path().join("fit");
    let out = rrmo(&["fit", "--data", s(&csv), "--schema", s(&schema), "--rank", "2", "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(out_dir.join("manifest.json").exists());
    let bundle = ModelBundle::load(&out_dir.join("model.json")).unwrap();

    let (std_data, params) = standardize(&data).unwrap();
    let options = FitOptions { rank: Some(2), ..Default::default() };
    let comp = fit_components(&std_data, &options, &PropensitySource::Estimated).unwrap();
    let close = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).amax() < 1e-10;
    let loaded = bundle.standardization.as_ref().unwrap();
    for (a, b) in loaded.covariate_mean.iter().zip(&params.covariate_mean) {
        assert!((a - b).abs() < 1e-10);
    }
    for t in 0..2 {
        let rrr = &comp.models.rrr().unwrap()[t];
        assert!(close(&bundle.rrr[t].a_hat, &rrr.a_hat));
        assert!(close(&bundle.rrr[t].b_hat, &rrr.b_hat));
        assert!(close(&bundle.ols[t].coef, &comp.models.ols[t].coef));
    }
    for (a, b) in bundle.propensity.beta.iter().zip(&comp.propensity.beta) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn rank_above_limit_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let (_, csv, schema) = synthetic(dir.path(), 200, 3);
    let out = rrmo(&["fit", "--data", s(&csv), "--schema", s(&schema), "--rank", "5", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn constant_outcome_column_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let params = generate_dgp(4, 3, 1, 1.0, 5).unwrap();
    let data = sample_dataset(&params, 120, 6).unwrap();
    let mut y = data.outcomes().clone();
    y.column_mut(1).fill(3.0);
    let constant = Dataset::new(data.covariates().clone(), data.treatments().to_vec(), y).unwrap();
    let (csv, schema) = dump(dir.path(), &constant);
    let out = rrmo(&["fit", "--data", s(&csv), "--schema", s(&schema), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("zero variance"), "{}", stderr(&out));
}

#[test]
fn bad_schema_and_missing_values_are_data_errors() {
    let dir = TempDir::new().unwrap();
    let (_, csv, _) = synthetic(dir.path(), 100, 7);
    let wrong = write_json(dir.path(), "wrong.json", r#"{"covariates":["nope"],"treatment":"t","outcomes":["y1"]}"#);
    let out = rrmo(&["fit", "--data", s(&csv), "--schema", s(&wrong), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 4);
    let holes = dir.path().join("holes.csv");
    fs::write(&holes, "x1,t,y1\n1.0,1,\n2.0,0,1.0\n").unwrap();
    let schema = write_json(dir.path(), "s.json", r#"{"covariates":["x1"],"treatment":"t","outcomes":["y1"]}"#);
    let out = rrmo(&["fit", "--data", s(&holes), "--schema", s(&schema), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("missing value"));
}

fn learn(dir: &Path, csv: &Path, schema: &Path, name: &str, extra: &[&str]) -> (Output, PathBuf) {
    let out_dir = dir.join(name);
    let mut args = vec!["learn", "--data", s(csv), "--schema", s(schema), "--out-dir", s(&out_dir)];
    args.extend_from_slice(extra);
    (rrmo(&args), out_dir)
}

#[test]
fn evaluate_reproduces_learned_in_sample_value() {
    let dir = TempDir::new().unwrap();
    let (_, csv, schema) = synthetic(dir.path(), 300, 31);
    let rho = "1,-0.5,0.25,2";
    let (out, learned) = learn(dir.path(), &csv, &schema, "learn", &["--estimator", "cv:rrr_mu", "--rank", "2", "--rho", rho]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(learned.join("trace.csv").exists() && learned.join("manifest.json").exists());
    let policy = PolicyFile::load(&learned.join("policy.json")).unwrap();

    let fitted = dir.path().join("fit");
    let out = rrmo(&["fit", "--data", s(&csv), "--schema", s(&schema), "--rank", "2", "--out-dir", s(&fitted)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let policy_path = learned.join("policy.json");
    let model_path = fitted.join("model.json");
    let base = ["evaluate", "--data", s(&csv), "--schema", s(&schema), "--model", s(&model_path), "--policy", s(&policy_path)];
    let mut args = base.to_vec();
    args.extend(["--estimator", "cv:rrr_mu", "--estimator", "dm:rrr_mu", "--estimator", "ipw:observed_y"]);
    let out = rrmo(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).expect("stdout is only JSON");
    let results = report["results"].as_array().unwrap();
    assert_eq!(results.len(), 3);
    assert_eq!(results[0]["estimator"], "cv:rrr_mu");
    assert_eq!(results[0]["n"], 300);
    let value = results[0]["value"].as_f64().unwrap();
    assert!((value - policy.in_sample_value).abs() < 1e-10, "{value} vs {}", policy.in_sample_value);

    let mut args = base.to_vec();
    args.extend(["--estimator", "dm:rrr_mu", "--rho", "1,2"]);
    let out = rrmo(&args);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(out.stdout.is_empty());
}

#[test]
fn zero_iterations_rejected() {
    let dir = TempDir::new().unwrap();
    let (_, csv, schema) = synthetic(dir.path(), 100, 41);
    let cfg = write_json(dir.path(), "opt.json", r#"{"iterations":0}"#);
    let (out, _) = learn(dir.path(), &csv, &schema, "l", &["--estimator", "dm:rrr_mu", "--config", s(&cfg)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn maximizing_negated_outcomes_matches_minimizing() {
    let dir = TempDir::new().unwrap();
    let (data, csv, schema) = synthetic(dir.path(), 250, 51);
    let neg_dir = dir.path().join("neg");
    fs::create_dir(&neg_dir).unwrap();
    let (neg_csv, _) = dump(&neg_dir, &data.negate_outcomes());
    let common = ["--estimator", "dr:rrr_mu", "--rank", "2", "--rho", "1,1,-1,0.5"];
    let (out, a) = learn(dir.path(), &csv, &schema, "min", &[&common[..], &["--sense", "min"]].concat());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (out, b) = learn(dir.path(), &neg_csv, &schema, "max", &[&common[..], &["--sense", "max"]].concat());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let pa = PolicyFile::load(&a.join("policy.json")).unwrap();
    let pb = PolicyFile::load(&b.join("policy.json")).unwrap();
    let bits = |p: &PolicyFile| p.policy.theta.iter().map(|t| t.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&pa), bits(&pb));
    assert_ne!(pa.policy.theta, vec![0.0; 6]);
}

#[test]
fn dominant_arm_is_learned() {
    let dir = TempDir::new().unwrap();
    let n = 400;
    let mut rng_state = 7u64;
    let mut next = || {
        rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (rng_state >> 11) as f64 / (1u64 << 53) as f64
    };
    let x = DMatrix::from_fn(n, 3, |_, _| next() * 2.0 - 1.0);
    let t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    // Arm 1 has uniformly lower loss on both outcomes. The outcome models have
    // no intercept, so the constant gap is only visible through the residual term.
    let y = DMatrix::from_fn(n, 2, |i, j| {
        let base = x[(i, 0)] + 0.5 * x[(i, 1)] * (j as f64 + 1.0) + 0.1 * (next() - 0.5);
        if t[i] == 1 { base - 4.0 } else { base + 4.0 }
    });
    let data = Dataset::new(x, t, y).unwrap();
    let (csv, schema) = dump(dir.path(), &data);
    let cfg = write_json(dir.path(), "opt.json", r#"{"iterations":200,"learning_rate":0.5,"intercept":true}"#);
    let (out, learned) =
        learn(dir.path(), &csv, &schema, "l", &["--estimator", "dr:rrr_mu", "--rank", "1", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let policy = PolicyFile::load(&learned.join("policy.json")).unwrap();
    let probs = policy.treat_probs_raw(data.covariates()).unwrap();
    let treated = probs.iter().filter(|&&p| p > 0.5).count() as f64 / n as f64;
    assert!(treated > 0.95, "treated share {treated}");
}

#[test]
fn diverging_optimizer_writes_last_good_theta() {
    let dir = TempDir::new().unwrap();
    let (_, csv, schema) = synthetic(dir.path(), 200, 61);
    let cfg = write_json(dir.path(), "opt.json", r#"{"iterations":5,"learning_rate":1e308}"#);
    let (out, learned) = learn(
        dir.path(),
        &csv,
        &schema,
        "l",
        &["--estimator", "ipw:observed_y", "--rank", "2", "--rho", "1e300,1e300,1e300,1e300", "--config", s(&cfg)],
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let last: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(learned.join("last_good_theta.json")).unwrap()).unwrap();
    assert!(last["theta"].as_array().unwrap().iter().all(|v| v.as_f64().unwrap().is_finite()));
    assert!(!learned.join("policy.json").exists());
}
