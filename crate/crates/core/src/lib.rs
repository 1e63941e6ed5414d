//! Robust estimators for heavy-tailed data with dimension-free deviation
//! bounds: means of vectors and matrices, Gram matrices, and least squares.

pub mod error;
pub mod influence;
pub mod linalg;
pub mod optim;
pub mod vector_mean;

pub use error::{Error, Result};
pub mod cli;
pub mod gram;
pub mod harness;
pub mod matrix_mean;
pub mod regression;
