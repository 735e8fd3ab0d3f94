//! Mean-field Gaussian Bayesian MLP.
//!
//! Every weight `w` has a variational mean `μ` and an unconstrained `ρ` with
//! `σ = softplus(ρ)`. Training minimizes `nll + kl_scale·KL(q‖p)` with the
//! reparameterization `w = μ + σ·ε`. A [`Mode::Deterministic`] net ignores ρ
//! and serves as the plain FedAvg baseline.

pub mod check;
mod elbo;
pub mod io;
mod kl;
mod net;

pub use elbo::{
    elbo_backward, elbo_backward_with_noise, elbo_loss, elbo_loss_with_noise, forward, predict, predictive, realize,
    relu_margin, sample_weights, score, sgd_step, Batch, ElboBreakdown, Gradients, RealizedWeights, WeightNoise,
};
pub use kl::{kl_diag_gauss, kl_gauss};
pub use net::{Mode, Prior, VariationalLayer, VariationalNet, INIT_SIGMA};

#[cfg(test)]
mod tests;
