//! Persuasion rates on the treated from binary-outcome panels.

pub mod boe;
pub mod bounds;
pub mod dataset;
pub mod error;
pub mod nuisance;
pub mod report;
pub mod semipar;
pub mod sim;
pub mod staggered;
pub mod stats;
pub mod twoperiod_reg;

pub use error::{Error, Result};
pub use report::{Estimand, EstimateReport, Target};

/// Library version embedded in CLI outputs.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
