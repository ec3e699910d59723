//! Numerical core for MR-to-CT synthesis with a PET-residual objective.
//!
//! Everything here is pure computation over in-memory buffers and builds
//! without the standard library (`alloc` is required). File formats, the
//! command line and process-level concerns live in the companion `petmr`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod image;
pub mod models;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod physics;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use image::{Image2D, Modality};
pub use rng::Rng;
