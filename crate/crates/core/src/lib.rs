//! Estimation of a recalled discrete survival time (time-to-pregnancy) from
//! survey data that carries self-reported recall certainty, planning
//! intention, covariates and sampling weights.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: hazard, frailty-marginal pmf/survival, certainty and intention models
//! - [`likelihood`]: weighted log-likelihood with analytic gradients
//! - [`optimize`]: limited-memory quasi-Newton maximiser
//! - [`estimation`]: MLE fitting, observed-information covariance, Wald intervals
//! - [`simulation`]: synthetic data and Monte Carlo bias/coverage studies
//! - [`prediction`]: Monte Carlo empirical-Bayes conditional survival curves
//! - [`evaluation`]: holdout validation with ROC/AUC
//! - [`io`]: dataset and config files, CSV writers

pub mod cli;
pub mod estimation;
pub mod evaluation;
pub mod io;
pub mod likelihood;
pub mod optimize;
pub mod model;
pub mod prediction;
pub mod rng;
pub mod simulation;
pub mod sum;
