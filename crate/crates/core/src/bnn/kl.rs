use super::{Mode, Prior, VariationalNet};
use crate::numkernel::softplus;
use crate::{Error, Result};

/// KL(N(μ_q, σ_q²) ‖ N(μ_p, σ_p²)) for one scalar.
#[inline]
pub fn kl_gauss(mu_q: f64, sigma_q: f64, mu_p: f64, sigma_p: f64) -> f64 {
    let d = mu_q - mu_p;
    (sigma_p / sigma_q).ln() + (sigma_q * sigma_q + d * d) / (2.0 * sigma_p * sigma_p) - 0.5
}

/// Closed-form KL(q ‖ p) summed over every weight of the network.
pub fn kl_diag_gauss(net: &VariationalNet, prior: &Prior) -> Result<f64> {
    if net.mode() == Mode::Deterministic {
        return Err(Error::Contract(
            "KL is undefined for a deterministic (point-mass) network".into(),
        ));
    }
    if !(prior.sigma0 > 0.0) {
        return Err(Error::Argument(format!("sigma0 must be > 0, got {}", prior.sigma0)));
    }
    let mut total = 0.0;
    for layer in net.layers() {
        let pairs = layer
            .mu_w
            .as_slice()
            .iter()
            .zip(layer.rho_w.as_slice())
            .chain(layer.mu_b.as_slice().iter().zip(layer.rho_b.as_slice()));
        for (&mu, &rho) in pairs {
            total += kl_gauss(mu, softplus(rho), prior.mu0, prior.sigma0);
        }
    }
    Ok(total)
}
