//! Sphere search and cutting-plane minimax shared by the estimators.

pub mod bundle;
pub mod sphere;

pub use bundle::{minimize, BundleConfig, BundleResult, Cut, CutOracle};
pub use sphere::{SphereMax, SphereSearch};
