pub mod baselines;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod ensemble;
pub mod estimator;
pub mod error;
pub mod inference;
pub mod learners;
pub mod mase;
pub mod nuisance;
pub mod numeric;
pub mod report;
pub mod simulation;

pub use error::{Error, Result};
