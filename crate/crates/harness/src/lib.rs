//! Simulation harness for the blind MIMO equalizers in `vaee-core`: seeded
//! link simulation or capture replay, the training protocol, metrics, and
//! result files.

pub mod config;
pub mod error;
pub mod experiment;
pub mod iq;
pub mod run;
pub mod source;

pub use config::{Algorithm, ExperimentConfig};
pub use error::{HarnessError, Result};
