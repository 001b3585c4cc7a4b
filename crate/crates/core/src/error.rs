use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report. `code()` gives the stable
/// machine-readable tag used in JSON error payloads.
#[derive(Debug, Error)]
pub enum Error {
    #[error("column `{0}` not found in header")]
    MissingColumn(String),

    #[error("row {row}: column `{column}` has value `{value}`, expected 0 or 1")]
    NonBinaryValue {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: column `{column}` has non-numeric value `{value}`")]
    NonNumericValue {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: adoption time `{value}` must be in 1..={horizon} or the never-treated token")]
    InvalidAdoption {
        row: usize,
        value: String,
        horizon: usize,
    },

    #[error("{0}")]
    EmptyArm(String),

    #[error("no never-treated units in the panel")]
    NoNeverTreated,

    #[error("covariate column {column} has {levels} distinct levels (cap {cap})")]
    TooManyLevels {
        column: usize,
        levels: usize,
        cap: usize,
    },

    #[error("perfect separation detected while fitting {0}")]
    Separation(String),

    #[error("insufficient data in arm: {0}")]
    InsufficientArm(String),

    #[error("denominator {value:e} is within the guard {guard:e}: {context}")]
    DegenerateDenominator {
        value: f64,
        guard: f64,
        context: String,
    },

    #[error("instrument covariance {value:e} is within the guard {guard:e}")]
    WeakDenominator { value: f64, guard: f64 },

    #[error("covariate matrix is rank deficient: {0}")]
    RankDeficientX(String),

    #[error("argument outside the domain: {0}")]
    Domain(String),

    #[error("link function evaluated outside its domain: {0}")]
    LinkDomain(String),

    #[error("{0}")]
    UnsupportedLink(String),

    #[error("empty group: {0}")]
    EmptyGroup(String),

    #[error("horizon out of range: {0}")]
    HorizonOutOfRange(String),

    #[error("no eligible adoption cohorts for horizon {0}")]
    NoEligibleGroups(i64),

    #[error("stacked influence covariance is singular or not finite")]
    SingularSigma,

    #[error("back-of-the-envelope inference requires a nonnegative ATT, got {0}")]
    NegativeAtt(f64),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::MissingColumn(_) => "MISSING_COLUMN",
            Error::NonBinaryValue { .. } => "NON_BINARY_VALUE",
            Error::NonNumericValue { .. } => "NON_NUMERIC_VALUE",
            Error::InvalidAdoption { .. } => "INVALID_ADOPTION",
            Error::EmptyArm(_) => "EMPTY_ARM",
            Error::NoNeverTreated => "NO_NEVER_TREATED",
            Error::TooManyLevels { .. } => "TOO_MANY_LEVELS",
            Error::Separation(_) => "SEPARATION",
            Error::InsufficientArm(_) => "INSUFFICIENT_ARM",
            Error::DegenerateDenominator { .. } => "DEGENERATE_DENOMINATOR",
            Error::WeakDenominator { .. } => "WEAK_DENOMINATOR",
            Error::RankDeficientX(_) => "RANK_DEFICIENT_X",
            Error::Domain(_) => "DOMAIN",
            Error::LinkDomain(_) => "LINK_DOMAIN",
            Error::UnsupportedLink(_) => "UNSUPPORTED_LINK",
            Error::EmptyGroup(_) => "EMPTY_GROUP",
            Error::HorizonOutOfRange(_) => "HORIZON_OUT_OF_RANGE",
            Error::NoEligibleGroups(_) => "NO_ELIGIBLE_GROUPS",
            Error::SingularSigma => "SINGULAR_SIGMA",
            Error::NegativeAtt(_) => "NEGATIVE_ATT",
            Error::InvalidInput(_) => "INVALID_INPUT",
            Error::Io { .. } => "IO",
            Error::Csv(_) => "CSV",
        }
    }

    /// Input/validation failures, as opposed to failures during estimation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MissingColumn(_)
                | Error::NonBinaryValue { .. }
                | Error::NonNumericValue { .. }
                | Error::InvalidAdoption { .. }
                | Error::EmptyArm(_)
                | Error::NoNeverTreated
                | Error::TooManyLevels { .. }
                | Error::InvalidInput(_)
                | Error::Io { .. }
                | Error::Csv(_)
        )
    }

    pub fn payload(&self) -> ErrorPayload {
        let context = match self {
            Error::MissingColumn(c) => serde_json::json!({ "column": c }),
            Error::NonBinaryValue { row, column, value }
            | Error::NonNumericValue { row, column, value } => {
                serde_json::json!({ "row": row, "column": column, "value": value })
            }
            Error::InvalidAdoption {
                row,
                value,
                horizon,
            } => serde_json::json!({ "row": row, "value": value, "horizon": horizon }),
            Error::TooManyLevels {
                column,
                levels,
                cap,
            } => serde_json::json!({ "column": column, "levels": levels, "cap": cap }),
            Error::DegenerateDenominator { value, guard, .. } => {
                serde_json::json!({ "value": value, "guard": guard })
            }
            Error::WeakDenominator { value, guard } => {
                serde_json::json!({ "value": value, "guard": guard })
            }
            Error::NoEligibleGroups(j) => serde_json::json!({ "horizon": j }),
            Error::Io { path, .. } => serde_json::json!({ "path": path }),
            _ => serde_json::Value::Null,
        };
        ErrorPayload {
            code: self.code().to_string(),
            message: self.to_string(),
            context,
        }
    }
}

/// JSON shape of an error: `{code, message, context}`.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorPayload {
    pub code: String,
    pub message: String,
    pub context: serde_json::Value,
}

/// Guard shared by every ratio estimator.
pub const DENOMINATOR_GUARD: f64 = 1e-8;

pub(crate) fn guard_denominator(value: f64, context: &str) -> Result<()> {
    if !value.is_finite() || value.abs() <= DENOMINATOR_GUARD {
        return Err(Error::DegenerateDenominator {
            value,
            guard: DENOMINATOR_GUARD,
            context: context.to_string(),
        });
    }
    Ok(())
}
