//! Federated intrusion-detection simulator with per-client magnitude pruning,
//! mask-aware aggregation, an analytic energy model and a pruning-ratio optimizer.

pub mod cli;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod exec;
pub mod federation;
pub mod nn;
pub mod partition;
pub mod pruning;
pub mod rho;
pub mod tensor;

pub use error::{Error, Result};
