//! CSV ingestion with a JSON schema sidecar, and JSON persistence of fitted
//! models and learned policies.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ObjectiveSense, OutcomeSpace, StandardizationParams};
use crate::error::{Error, Result};
use crate::estimators::{ArmModels, Components, CvWeighting, EstimatorSpec};
use crate::policy::{PolicyParams, TreatmentPolicy};
use crate::propensity::PropensityModel;
use crate::rrr::{FullRankModel, GammaMode, RrrModel};

/// Column roles of a data CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSchema {
    pub covariates: Vec<String>,
    pub treatment: String,
    pub outcomes: Vec<String>,
}

impl DataSchema {
    /// `x1..xp`, `t`, `y1..yk`.
    pub fn generic(p: usize, k: usize) -> Self {
        Self {
            covariates: (1..=p).map(|j| format!("x{j}")).collect(),
            treatment: "t".into(),
            outcomes: (1..=k).map(|j| format!("y{j}")).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.covariates.is_empty() || self.outcomes.is_empty() {
            return Err(Error::Schema("schema needs at least one covariate and one outcome".into()));
        }
        let mut seen = HashSet::new();
        for name in self.covariates.iter().chain(&self.outcomes).chain(std::iter::once(&self.treatment)) {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("column `{name}` is bound to more than one role")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::Schema(format!("cannot read {}: {e}", path.display())))?;
        let schema: Self = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        schema.validate()?;
        Ok(schema)
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
}

/// Reads a headed CSV. Extra columns are ignored; empty or non-numeric
/// cells are schema errors.
pub fn read_csv<R: Read>(reader: R, schema: &DataSchema) -> Result<Dataset> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let xi = schema.covariates.iter().map(|c| column_index(&headers, c)).collect::<Result<Vec<_>>>()?;
    let ti = column_index(&headers, &schema.treatment)?;
    let yi = schema.outcomes.iter().map(|c| column_index(&headers, c)).collect::<Result<Vec<_>>>()?;

    let (mut xs, mut ts, mut ys) = (Vec::new(), Vec::new(), Vec::new());
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let cell = |j: usize| -> Result<f64> {
            let raw = record.get(j).unwrap_or("").trim();
            if raw.is_empty() {
                return Err(Error::Schema(format!("missing value in row {row}, column `{}`", &headers[j])));
            }
            raw.parse::<f64>()
                .map_err(|_| Error::Schema(format!("non-numeric value `{raw}` in row {row}, column `{}`", &headers[j])))
        };
        for &j in &xi {
            xs.push(cell(j)?);
        }
        ts.push(cell(ti)?);
        for &j in &yi {
            ys.push(cell(j)?);
        }
    }
    let n = ts.len();
    if n == 0 {
        return Err(Error::Empty);
    }
    let x = DMatrix::from_row_slice(n, xi.len(), &xs);
    let y = DMatrix::from_row_slice(n, yi.len(), &ys);
    Dataset::from_treatment_values(x, &ts, y)
}

pub fn read_csv_path(path: &Path, schema: &DataSchema) -> Result<Dataset> {
    read_csv(BufReader::new(File::open(path)?), schema)
}

/// Writes covariates, treatment and outcomes under the schema's names.
pub fn write_csv<W: Write>(data: &Dataset, schema: &DataSchema, out: W) -> Result<()> {
    if schema.covariates.len() != data.p() || schema.outcomes.len() != data.k() {
        return Err(Error::Schema("schema does not match the dataset's dimensions".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<&str> = schema
        .covariates
        .iter()
        .chain(std::iter::once(&schema.treatment))
        .chain(&schema.outcomes)
        .map(String::as_str)
        .collect();
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut record: Vec<String> = data.covariates().row(i).iter().map(f64::to_string).collect();
        record.push(data.treatments()[i].to_string());
        record.extend(data.outcomes().row(i).iter().map(f64::to_string));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Everything `fit` produces: per-arm OLS and reduced-rank models, the
/// propensity model and the standardization they were fitted under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub schema: DataSchema,
    /// Absent when the models were fitted on raw data.
    pub standardization: Option<StandardizationParams>,
    pub propensity: PropensityModel,
    pub ols: [FullRankModel; 2],
    pub rrr: [RrrModel; 2],
    pub rank: usize,
    pub gamma_mode: GammaMode,
}

impl ModelBundle {
    pub fn new(
        schema: DataSchema,
        standardization: Option<StandardizationParams>,
        components: &Components,
        gamma_mode: GammaMode,
    ) -> Result<Self> {
        let rrr = components.models.rrr()?.clone();
        Ok(Self {
            schema,
            standardization,
            propensity: components.propensity.clone(),
            ols: components.models.ols.clone(),
            rank: rrr[0].rank,
            rrr,
            gamma_mode,
        })
    }

    pub fn components(&self, cv_weighting: CvWeighting) -> Components {
        let models = ArmModels { ols: self.ols.clone(), rrr: Some(self.rrr.clone()) };
        Components { propensity: self.propensity.clone(), models, cv_weighting }
    }

    /// Puts raw data on the scale the models were fitted on.
    pub fn prepare(&self, raw: &Dataset) -> Result<Dataset> {
        match &self.standardization {
            Some(params) => params.apply(raw),
            None => Ok(raw.clone()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }
}

/// A learned policy together with the covariate scaling it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub policy: PolicyParams,
    /// Covariate standardization applied before `θᵀx`; raw covariates when absent.
    pub standardization: Option<StandardizationParams>,
    pub estimator: EstimatorSpec,
    pub rho: Vec<f64>,
    pub mode: OutcomeSpace,
    pub sense: ObjectiveSense,
    pub iterations: usize,
    /// Objective value at the returned `θ` on the training data.
    pub in_sample_value: f64,
}

impl PolicyFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }

    /// `π(1 | x)` for raw covariate rows.
    pub fn treat_probs_raw(&self, raw_x: &DMatrix<f64>) -> Result<Vec<f64>> {
        match &self.standardization {
            Some(params) => {
                if raw_x.ncols() != params.covariate_mean.len() {
                    return Err(Error::DimensionMismatch {
                        context: "policy covariates",
                        expected: params.covariate_mean.len(),
                        found: raw_x.ncols(),
                    });
                }
                let scaled = DMatrix::from_fn(raw_x.nrows(), raw_x.ncols(), |i, j| {
                    (raw_x[(i, j)] - params.covariate_mean[j]) / params.covariate_sd[j]
                });
                self.policy.treat_probs(&scaled)
            }
            None => self.policy.treat_probs(raw_x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::standardize;
    use crate::pipeline::{fit_components, FitOptions, PropensitySource};
    use crate::simulation::{generate_dgp, sample_dataset};

    fn schema() -> DataSchema {
        DataSchema::generic(2, 2)
    }

    #[test]
    fn reads_with_extra_and_reordered_columns() {
        let text = "y2,id,x1,t,x2,y1\n1.5,a,0.1,1,0.2,3\n-2,b,0.3,0,0.4,4\n0,c,0.5,1,0.6,5\n";
        let d = read_csv(text.as_bytes(), &schema()).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.treatments(), &[1, 0, 1]);
        assert_eq!(d.covariates()[(1, 1)], 0.4);
        assert_eq!(d.outcomes()[(0, 0)], 3.0);
        assert_eq!(d.outcomes()[(0, 1)], 1.5);
    }

    #[test]
    fn rejects_missing_columns_values_and_junk() {
        let cases = [
            "x1,t,y1,y2\n1,1,1,1\n",
            "x1,x2,t,y1,y2\n1,,1,1,1\n",
            "x1,x2,t,y1,y2\n1,2,1,abc,1\n",
        ];
        for text in cases {
            assert!(matches!(read_csv(text.as_bytes(), &schema()), Err(Error::Schema(_))), "{text}");
        }
        let bad_t = "x1,x2,t,y1,y2\n1,2,2,1,1\n";
        assert!(matches!(read_csv(bad_t.as_bytes(), &schema()), Err(Error::InvalidTreatment { .. })));
        let nan = "x1,x2,t,y1,y2\n1,NaN,1,1,1\n";
        assert!(matches!(read_csv(nan.as_bytes(), &schema()), Err(Error::NonFiniteInput(_))));
    }

    #[test]
    fn schema_rejects_duplicate_roles() {
        let s = DataSchema { covariates: vec!["a".into()], treatment: "a".into(), outcomes: vec!["y".into()] };
        assert!(matches!(s.validate(), Err(Error::Schema(_))));
        let unknown = r#"{"covariates":["a"],"treatment":"t","outcomes":["y"],"extra":1}"#;
        assert!(serde_json::from_str::<DataSchema>(unknown).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let params = generate_dgp(3, 2, 1, 1.0, 9).unwrap();
        let data = sample_dataset(&params, 25, 10).unwrap();
        let s = DataSchema::generic(3, 2);
        let mut buf = Vec::new();
        write_csv(&data, &s, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &s).unwrap();
        assert_eq!(back.covariates(), data.covariates());
        assert_eq!(back.outcomes(), data.outcomes());
        assert_eq!(back.treatments(), data.treatments());
    }

    #[test]
    fn bundle_json_round_trip_is_exact() {
        let params = generate_dgp(4, 3, 2, 1.0, 11).unwrap();
        let raw = sample_dataset(&params, 200, 12).unwrap();
        let (data, st) = standardize(&raw).unwrap();
        let options = FitOptions { rank: Some(2), ..Default::default() };
        let comp = fit_components(&data, &options, &PropensitySource::Estimated).unwrap();
        let bundle = ModelBundle::new(DataSchema::generic(4, 3), Some(st), &comp, options.gamma_mode).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        bundle.save(&path).unwrap();
        assert_eq!(ModelBundle::load(&path).unwrap(), bundle);
        assert_eq!(bundle.prepare(&raw).unwrap().covariates(), data.covariates());
    }

    #[test]
    fn policy_file_standardizes_raw_covariates() {
        let x = DMatrix::from_row_slice(2, 1, &[3.0, 5.0]);
        let file = PolicyFile {
            policy: PolicyParams::new(vec![2.0]),
            standardization: Some(StandardizationParams {
                covariate_mean: vec![4.0],
                covariate_sd: vec![1.0],
                outcome_mean: vec![0.0],
                outcome_sd: vec![1.0],
            }),
            estimator: "dm:rrr_mu".parse().unwrap(),
            rho: vec![1.0],
            mode: OutcomeSpace::ObservedOutcomes,
            sense: ObjectiveSense::Minimize,
            iterations: 1,
            in_sample_value: 0.0,
        };
        let p = file.treat_probs_raw(&x).unwrap();
        assert!((p[0] - crate::linalg::sigmoid(-2.0)).abs() < 1e-15);
        assert!((p[1] - crate::linalg::sigmoid(2.0)).abs() < 1e-15);
        assert!(file.treat_probs_raw(&DMatrix::zeros(1, 2)).is_err());
    }
}
