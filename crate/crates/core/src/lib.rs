//! Near-field 3D source localization with a uniform planar array.
//!
//! Simulates mixed LoS/NLoS Rician channels, localizes sources with the
//! classical 3D MUSIC grid search and with a CNN regressing on covariance
//! eigenvectors, and benchmarks both for accuracy and runtime.

pub mod bench;
pub mod channel;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod music;
pub mod nn;
pub mod rng;
pub mod subspace;
pub mod tensor;

pub use error::{Error, Result};
