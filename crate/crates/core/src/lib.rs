//! SSVEP EEG classification workbench.
//!
//! The crate covers the whole offline pipeline for four-class SSVEP trials:
//!
//! - [`dataio`]: trial/dataset model, directory archives, synthetic generator
//! - [`dsp`]: decimation, re-referencing, notch and bandpass filtering
//! - [`features`]: covariance estimation and affine-invariant SPD geometry
//! - [`classic`]: LDA, MDM and one-vs-rest SVM baselines
//! - [`nn`]: layer engine with hand-written backward passes and Adam
//! - [`models`]: SCU convolutional networks, recurrent baselines, training loop
//! - [`harness`]: cross validation, experiment designs, grid search, reports

pub mod classic;
pub mod dataio;
pub mod dsp;
pub mod error;
pub mod features;
pub mod harness;
pub mod linalg;
pub mod models;
pub mod nn;
pub mod rng;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, ParseError, Result};
