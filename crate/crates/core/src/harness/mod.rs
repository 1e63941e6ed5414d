//! Synthetic data, coverage experiments and file I/O.

pub mod coverage;
pub mod data;
pub mod io;

pub use coverage::{run_coverage, CoverageConfig, EstimatorId, ExperimentReport, RadiusStats, Scenario};
pub use data::{trial_rng, Family, MatrixSpec, RegressionSpec, VectorSpec};
