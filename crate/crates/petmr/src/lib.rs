//! File formats, configuration and the end-to-end workflow around
//! `petmr-core`: dataset generation, staged training, reconstruction,
//! evaluation and the CT perturbation demonstration.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod store;

pub use config::{RunConfig, Variant};
pub use error::{Error, Result};
