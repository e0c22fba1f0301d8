//! Tabular imputation with a context-aware masked transformer autoencoder.
//!
//! The pipeline is: load a [`dataset::Table`], optionally corrupt it with a
//! simulated [`missingness`] mask, train a [`model`] with copy-mask batches
//! from [`masking`] via [`training::train`], fill the gaps with
//! [`imputation::Imputer`] and score the result with [`metrics`].

pub mod checkpoint;
pub mod context;
pub mod dataset;
pub mod error;
pub mod imputation;
pub mod masking;
pub mod metrics;
pub mod missingness;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
