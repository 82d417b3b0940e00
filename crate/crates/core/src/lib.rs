//! Optimal linear prediction for functional time series.
//!
//! The estimator regresses a functional response on the leading principal
//! directions of a functional predictor, with the truncation rank chosen by
//! an elbow-like gap rule. The crate also ships the population-level
//! machinery (Baker factorization, minimal MSPE) used to check it, a
//! simulator for functional AR(1) designs, and a Monte Carlo harness.

pub mod error;
pub mod covariance;
pub mod dgp;
pub mod harness;
pub mod hilbert;
pub mod population;
pub mod predictor;
pub mod verify;

pub use error::{Error, Result};
