//! Test-time batch-normalization adaptation laboratory.
//!
//! A small, fully deterministic CNN stack for studying how BatchNorm
//! statistics should be adapted on shifted test batches: train a model from
//! scratch, score per-class channel sensitivity with a closed-form
//! Wasserstein distance, and evaluate source/batch/hybrid normalization
//! strategies under label and covariate shift.

pub mod adaptation;
pub mod bn;
pub mod checkpoint;
mod container;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorContext, Result};
