//! Library half of the `fedhenet` binary: configuration, experiment runs and
//! the deployed coordinator and client roles.

pub mod config;
pub mod error;
pub mod experiment;
pub mod roles;

pub use error::{CliError, Result};

/// Broker used by `coordinator` and `client` when none is configured.
pub const DEFAULT_BROKER: &str = "mqtt://localhost:1883";
