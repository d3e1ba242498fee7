//! Single-round federated protocol over pluggable publish/subscribe
//! transports.

#[cfg(feature = "embedded-broker")]
pub mod broker;
pub mod counting;
mod error;
pub mod mqtt;
pub mod protocol;
pub mod simulate;
pub mod transport;

pub use error::{FedError, Result};
