//! Regression on time series with rare, extreme events.
//!
//! Standard mean-square training underweights exactly the samples that
//! matter most in intermittent systems. This crate provides the pieces
//! needed to do better on scalar targets:
//!
//! - [`density`]: a differentiable estimate of the target density, built
//!   from a histogram and interpolated in log space by a Matern-5/2
//!   Gaussian process, cheap enough to evaluate inside a training loop;
//! - [`loss`]: mean square error, inverse-density output weighting, an
//!   adjusted variant that also penalizes rare *predictions*, and a
//!   relative-entropy surrogate with a tunable negative-tail weight;
//! - [`regressor`]: a small dense/LSTM/dense model family with exact,
//!   reproducible backpropagation;
//! - [`train`]: Adam, contiguous splits, input-noise injection, early
//!   stopping, and seeded ensembles;
//! - [`metrics`]: log-density distance, density-conditioned MSE, and
//!   rate-dependent PR-area and F1 scores, all oracle-checkable;
//! - [`data`]: CSV ingestion, normalization, lead-time windowing, and a
//!   synthetic intermittent-burst benchmark;
//! - [`cli`]: the batch pipeline (`synth`, `fit-density`, `train`,
//!   `evaluate`) behind the `tailcast` binary.

pub mod cli;
pub mod data;
pub mod density;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod regressor;
pub mod textio;
pub mod train;

pub use error::{Error, Result};
