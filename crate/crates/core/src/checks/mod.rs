//! Self-verification suites: brute-force oracle comparisons and
//! finite-difference gradient checks over every layer type.

mod gradients;
mod oracle;

pub use gradients::{gradient_suite, GradientCase, GradientSuiteConfig, MODEL_RESOLUTION};
pub use oracle::{oracle_suite, OracleCase, OracleReport, ORACLE_TOL};
