//! Surprise-driven calibration for in-context learning.
//!
//! The crate turns the label-token probabilities an autoregressive model
//! assigns at every demonstration delimiter into signed surprise sequences,
//! trains a GRU calibrator that maps those sequences to class-prior
//! adjustments, and compares it with batch, linear-probe and content-free
//! prior estimators. An exact finite-concept Bayesian model ([`bayessim`])
//! doubles as a test oracle and as a synthetic logprob backend.

pub mod backends;
pub mod bayessim;
pub mod calibrators;
pub mod domain;
pub mod error;
pub mod harness;
pub mod selection;
pub mod seqnet;
pub mod surprise;

pub use error::{Error, Result};
