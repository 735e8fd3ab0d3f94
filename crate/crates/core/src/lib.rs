//! Simulator for personalized probabilistic federated learning.
//!
//! Every client trains a mean-field Gaussian Bayesian MLP by minimizing the
//! negative ELBO, picks its learning rate for the round by briefly training one
//! temporary model per candidate and scoring each on a held-out meta shard, and
//! the server averages the variational parameters.
//!
//! Module map:
//! - [`numkernel`]: dense tensors, loss primitives, seeded RNG derivation,
//!   finite-difference gradients.
//! - [`bnn`]: variational network, KL, ELBO loss and analytic gradients.
//! - [`datahub`]: dataset loading/synthesis, non-IID partitioning, corruption,
//!   client shards.
//! - [`fedcore`]: learning-rate selection, local training, aggregation, rounds.
//! - [`experiment`]: configs, multi-round runs, sweeps, metrics emission.
//! - [`exec`]: sequential or rayon-backed fan-out over independent work items.

pub mod bnn;
pub mod datahub;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod fedcore;
pub mod numkernel;

pub use error::{Error, Result};
pub use exec::Exec;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
