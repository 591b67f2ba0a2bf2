//! Probabilistic forecasting with echo state networks: reservoir state
//! generation, deterministic and Bayesian readouts, and uncertainty metrics.

pub mod data;
pub mod forecast;
pub mod hmc;
pub mod mc_dropout;
pub mod metrics;
pub mod prior;
pub mod quantile;
pub mod readout;
pub mod reservoir;
pub mod rng;
pub mod variational;
