//! Deterministic CNN training with structured feature-map regularizers.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod ops;
pub mod regularizers;
pub mod rng;
pub mod selftest;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
