//! Masked consistency uncertainty training for semantic segmentation, at
//! desk scale: synthetic multi-domain data, a small patch transformer with a
//! hand-written reverse pass, the confidence-threshold matching objective,
//! reference uncertainty baselines and misclassification-detection metrics.

pub mod archive;
pub mod baselines;
pub mod commands;
pub mod config;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod gamma_train;
pub mod linalg;
pub mod masking;
pub mod metrics;
pub mod nnet;
pub mod par;
pub mod seed;
pub mod store;

pub use error::{Error, Result};
