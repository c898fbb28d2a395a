//! Compressive sensing image reconstruction with Gaussian mixture patch priors.

pub mod benchmark;
pub mod dct;
pub mod error;
pub mod gmm;
pub mod image;
pub mod patches;
pub mod pipeline;
pub mod ple;
pub mod sensing;
pub mod solvers;

pub use error::{Error, Result};
