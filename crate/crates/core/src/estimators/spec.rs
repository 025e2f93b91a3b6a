use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::OutcomeSpace;
use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Dm,
    Ipw,
    Dr,
    Cv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OutcomeSource {
    ObservedY,
    OlsMu,
    RrrMu,
    RrrLatent,
}

/// Choice of `h_t(X)` inside the control variates `(1 − 1[T=t]/e_t) h_t(X)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CvTarget {
    /// `B̂_t x`
    #[default]
    BhatX,
    /// Sample mean of `Y` on every row.
    MeanY,
    /// Pooled OLS fit of `Y` on `X`.
    RegYGivenX,
    /// Pooled OLS fit of the observed-arm `Ẑ` on `X`.
    RegZhatGivenX,
    /// Per-arm OLS fit of `Y` on `X`.
    RegYGivenTx,
}

/// Estimator family × outcome source (× control-variate target).
///
/// Text form is `family:source[:cv_target]`, e.g. `dm:rrr_mu` or
/// `cv:observed_y:bhatx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EstimatorSpec {
    pub family: Family,
    pub source: OutcomeSource,
    pub cv_target: CvTarget,
}

impl EstimatorSpec {
    pub const fn new(family: Family, source: OutcomeSource) -> Self {
        Self {
            family,
            source,
            cv_target: CvTarget::BhatX,
        }
    }

    pub const fn with_cv_target(mut self, cv_target: CvTarget) -> Self {
        self.cv_target = cv_target;
        self
    }

    /// Checks family/source/mode compatibility.
    pub fn validate(&self, mode: OutcomeSpace) -> Result<(), Error> {
        let latent = self.source == OutcomeSource::RrrLatent;
        match (latent, mode) {
            (true, OutcomeSpace::ObservedOutcomes) => {
                return Err(Error::InvalidSpec(format!("{self} needs latent-factor weights")))
            }
            (false, OutcomeSpace::LatentFactors) => {
                return Err(Error::InvalidSpec(format!("{self} needs observed-outcome weights")))
            }
            _ => {}
        }
        match (self.family, self.source) {
            (Family::Dm, OutcomeSource::ObservedY) => {
                Err(Error::InvalidSpec("direct method cannot use observed outcomes".into()))
            }
            (Family::Dr, OutcomeSource::ObservedY | OutcomeSource::RrrLatent) => {
                Err(Error::InvalidSpec("doubly robust needs ols_mu or rrr_mu".into()))
            }
            _ => Ok(()),
        }
    }

    /// Outcome space whose weights this spec consumes.
    pub fn space(&self) -> OutcomeSpace {
        if self.source == OutcomeSource::RrrLatent {
            OutcomeSpace::LatentFactors
        } else {
            OutcomeSpace::ObservedOutcomes
        }
    }

    /// Whether evaluating this spec needs per-arm reduced-rank fits.
    pub fn needs_rrr(&self) -> bool {
        matches!(self.source, OutcomeSource::RrrMu | OutcomeSource::RrrLatent)
            || (self.family == Family::Cv && matches!(self.cv_target, CvTarget::BhatX | CvTarget::RegZhatGivenX))
    }

    /// The nine baseline/ablation variants on observed-outcome weights,
    /// plus the latent-factor family.
    pub fn standard_set() -> Vec<EstimatorSpec> {
        use Family::*;
        use OutcomeSource::*;
        vec![
            Self::new(Dm, OlsMu),
            Self::new(Ipw, OlsMu),
            Self::new(Cv, OlsMu),
            Self::new(Ipw, ObservedY),
            Self::new(Cv, ObservedY),
            Self::new(Dr, OlsMu),
            Self::new(Dm, RrrMu),
            Self::new(Ipw, RrrMu),
            Self::new(Cv, RrrMu),
            Self::new(Dr, RrrMu),
        ]
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Dm => "dm",
            Family::Ipw => "ipw",
            Family::Dr => "dr",
            Family::Cv => "cv",
        })
    }
}

impl fmt::Display for OutcomeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutcomeSource::ObservedY => "observed_y",
            OutcomeSource::OlsMu => "ols_mu",
            OutcomeSource::RrrMu => "rrr_mu",
            OutcomeSource::RrrLatent => "rrr_latent",
        })
    }
}

impl fmt::Display for CvTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CvTarget::BhatX => "bhatx",
            CvTarget::MeanY => "mean_y",
            CvTarget::RegYGivenX => "reg_y_given_x",
            CvTarget::RegZhatGivenX => "reg_zhat_given_x",
            CvTarget::RegYGivenTx => "reg_y_given_tx",
        })
    }
}

impl fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.family, self.source)?;
        if self.family == Family::Cv && self.cv_target != CvTarget::BhatX {
            write!(f, ":{}", self.cv_target)?;
        }
        Ok(())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "dm" => Ok(Family::Dm),
            "ipw" => Ok(Family::Ipw),
            "dr" => Ok(Family::Dr),
            "cv" => Ok(Family::Cv),
            other => Err(Error::InvalidSpec(format!("unknown estimator family `{other}`"))),
        }
    }
}

impl FromStr for OutcomeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "observed_y" | "y" => Ok(OutcomeSource::ObservedY),
            "ols_mu" | "mu" => Ok(OutcomeSource::OlsMu),
            "rrr_mu" | "rr" => Ok(OutcomeSource::RrrMu),
            "rrr_latent" | "z" => Ok(OutcomeSource::RrrLatent),
            other => Err(Error::InvalidSpec(format!("unknown outcome source `{other}`"))),
        }
    }
}

impl FromStr for CvTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "bhatx" => Ok(CvTarget::BhatX),
            "mean_y" => Ok(CvTarget::MeanY),
            "reg_y_given_x" => Ok(CvTarget::RegYGivenX),
            "reg_zhat_given_x" => Ok(CvTarget::RegZhatGivenX),
            "reg_y_given_tx" => Ok(CvTarget::RegYGivenTx),
            other => Err(Error::InvalidSpec(format!("unknown control-variate target `{other}`"))),
        }
    }
}

impl FromStr for EstimatorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let spec = match parts.as_slice() {
            [family, source] => EstimatorSpec::new(family.parse()?, source.parse()?),
            [family, source, target] => {
                let family: Family = family.parse()?;
                if family != Family::Cv {
                    return Err(Error::InvalidSpec(format!("`{s}`: only cv takes a target")));
                }
                EstimatorSpec::new(family, source.parse()?).with_cv_target(target.parse()?)
            }
            _ => return Err(Error::InvalidSpec(format!("`{s}`: expected family:source[:cv_target]"))),
        };
        Ok(spec)
    }
}

impl TryFrom<String> for EstimatorSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self, Error> {
        s.parse()
    }
}

impl From<EstimatorSpec> for String {
    fn from(spec: EstimatorSpec) -> String {
        spec.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_prints() {
        for text in ["dm:rrr_mu", "ipw:observed_y", "cv:ols_mu:mean_y", "dr:ols_mu", "ipw:rrr_latent"] {
            let spec: EstimatorSpec = text.parse().unwrap();
            assert_eq!(spec.to_string(), text);
        }
        assert_eq!("cv:rrr_mu:bhatx".parse::<EstimatorSpec>().unwrap().to_string(), "cv:rrr_mu");
        assert!("dm:rrr_mu:bhatx".parse::<EstimatorSpec>().is_err());
        assert!("xx:rrr_mu".parse::<EstimatorSpec>().is_err());
    }

    #[test]
    fn validity_rules() {
        let obs = OutcomeSpace::ObservedOutcomes;
        let lat = OutcomeSpace::LatentFactors;
        assert!("dm:observed_y".parse::<EstimatorSpec>().unwrap().validate(obs).is_err());
        assert!("dr:observed_y".parse::<EstimatorSpec>().unwrap().validate(obs).is_err());
        assert!("dr:rrr_mu".parse::<EstimatorSpec>().unwrap().validate(obs).is_ok());
        assert!("ipw:rrr_latent".parse::<EstimatorSpec>().unwrap().validate(obs).is_err());
        assert!("ipw:rrr_latent".parse::<EstimatorSpec>().unwrap().validate(lat).is_ok());
        assert!("ipw:rrr_mu".parse::<EstimatorSpec>().unwrap().validate(lat).is_err());
    }

    #[test]
    fn serde_uses_text_form() {
        let spec: EstimatorSpec = serde_json::from_str("\"cv:rrr_mu\"").unwrap();
        assert_eq!(spec.family, Family::Cv);
        assert_eq!(serde_json::to_string(&spec).unwrap(), "\"cv:rrr_mu\"");
    }
}
