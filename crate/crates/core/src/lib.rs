//! Core of FedHENet: the closed-form ROLANN layer and its exact federated
//! aggregation, embedding data handling, iterative baselines, wire codecs
//! and cost accounting.

pub mod baselines;
pub mod data;
mod error;
pub mod linalg;
pub mod metrics;
pub mod rolann;
pub mod wire;

pub use error::{CoreError, Result};
