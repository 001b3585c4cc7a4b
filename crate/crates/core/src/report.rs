//! Result records shared by every estimator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::stats::two_sided_z;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Estimand {
    Aprt,
    Raprt,
    Att,
    Espr,
    ThetaSt,
    /// Difference APRT minus R-APRT from the joint moment system.
    AprtMinusRaprt,
}

/// Which persuasion rate an estimator targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Target {
    Aprt,
    Raprt,
}

impl Target {
    pub const BOTH: [Target; 2] = [Target::Aprt, Target::Raprt];

    pub fn estimand(self) -> Estimand {
        match self {
            Target::Aprt => Estimand::Aprt,
            Target::Raprt => Estimand::Raprt,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Target::Aprt => "aprt",
            Target::Raprt => "raprt",
        }
    }
}

impl std::str::FromStr for Target {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "aprt" => Ok(Target::Aprt),
            "raprt" => Ok(Target::Raprt),
            other => Err(Error::InvalidInput(format!("unknown target `{other}`"))),
        }
    }
}

/// Point estimate with standard error and a normal confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimand: Estimand,
    pub estimator: String,
    pub point: f64,
    pub se: f64,
    pub ci: [f64; 2],
    /// Confidence level `1 - alpha`.
    pub level: f64,
    pub n: usize,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub diagnostics: BTreeMap<String, serde_json::Value>,
}

impl EstimateReport {
    pub fn new(estimand: Estimand, estimator: &str, point: f64, se: f64, alpha: f64, n: usize) -> Self {
        let z = two_sided_z(alpha);
        let ci = if se.is_finite() {
            [point - z * se, point + z * se]
        } else {
            [f64::NAN, f64::NAN]
        };
        let mut warnings = Vec::new();
        if matches!(estimand, Estimand::Aprt | Estimand::Raprt | Estimand::Espr | Estimand::ThetaSt)
            && !(0.0..=1.0).contains(&point)
        {
            warnings.push(format!("point estimate {point:.6} lies outside [0, 1]"));
        }
        EstimateReport {
            estimand,
            estimator: estimator.to_string(),
            point,
            se,
            ci,
            level: 1.0 - alpha,
            n,
            warnings,
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn with_diagnostic(mut self, key: &str, value: impl Serialize) -> Self {
        self.diagnostics.insert(
            key.to_string(),
            serde_json::to_value(value).unwrap_or(serde_json::Value::Null),
        );
        self
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        self.warnings.push(msg.into());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_brackets_point() {
        let r = EstimateReport::new(Estimand::Aprt, "fe", 0.4, 0.1, 0.05, 10);
        assert!(r.ci[0] < r.point && r.point < r.ci[1]);
        assert!((r.ci[1] - r.point - 0.195_996_398_454_005_4).abs() < 1e-12);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn flags_out_of_range() {
        let r = EstimateReport::new(Estimand::Raprt, "fe", 1.2, 0.1, 0.05, 10);
        assert_eq!(r.warnings.len(), 1);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["estimand"], "RAPRT");
        for k in ["estimand", "estimator", "point", "se", "ci", "level", "n", "warnings"] {
            assert!(json.get(k).is_some(), "{k}");
        }
    }
}
