//! Self-verification suites behind `fedbayes gradcheck` / `fedbayes klcheck`.

use super::elbo::{elbo_backward_with_noise, elbo_loss_with_noise, realize, relu_margin, Batch, WeightNoise};
use super::kl::kl_gauss;
use super::{Mode, Prior, VariationalNet};
use crate::numkernel::{derive_rng, finite_diff_grad, rel_err, softplus_inv, RngStream, SeedPath};
use crate::Result;

/// Pass threshold for [`gradcheck`].
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Pass threshold for [`klcheck`].
pub const KLCHECK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub cases: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRADCHECK_TOL
    }
}

/// One randomized gradient-check problem with its noise frozen.
#[derive(Debug, Clone)]
pub struct GradcheckCase {
    pub net: VariationalNet,
    pub prior: Prior,
    pub kl_scale: f64,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub noises: Vec<WeightNoise>,
}

impl GradcheckCase {
    pub fn batch(&self) -> Batch<'_> {
        Batch::new(self.inputs.iter().map(|r| r.as_slice()).collect(), self.labels.clone())
            .expect("case batches are non-empty")
    }

    /// Draw a tiny net (at most 50 weights) and a batch whose hidden
    /// pre-activations all stay at least `margin` away from the ReLU kink.
    pub fn random(rng: &mut RngStream, mode: Mode, margin: f64) -> Result<Self> {
        loop {
            let d = 2 + rng.below(3);
            let h = 2 + rng.below(4);
            let c = 2 + rng.below(2);
            if d * h + h + h * c + c > 50 {
                continue;
            }
            let mut net = VariationalNet::init(&[d, h, c], mode, 0.1, rng)?;
            let mut flat = net.to_flat();
            for v in flat.iter_mut() {
                *v = rng.normal() * 0.8;
            }
            net.set_flat(&flat)?;
            for layer in net.layers_mut() {
                for s in [layer.rho_w.as_mut_slice(), layer.rho_b.as_mut_slice()] {
                    for r in s {
                        *r = softplus_inv(0.05 + 0.45 * rng.uniform())?;
                    }
                }
            }
            let prior = Prior::new(rng.normal() * 0.3, 0.5 + 1.5 * rng.uniform())?;
            let kl_scale = match mode {
                Mode::Bayesian => 0.01 + rng.uniform(),
                Mode::Deterministic => 0.0,
            };
            let n = 3 + rng.below(4);
            let inputs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
            let noises: Vec<WeightNoise> = match mode {
                Mode::Bayesian => (0..1 + rng.below(2)).map(|_| WeightNoise::draw(&net, rng)).collect(),
                Mode::Deterministic => Vec::new(),
            };
            let case = Self {
                net,
                prior,
                kl_scale,
                inputs,
                labels,
                noises,
            };
            if case.margin()? >= margin {
                return Ok(case);
            }
        }
    }

    fn margin(&self) -> Result<f64> {
        let batch = self.batch();
        let mut m = f64::INFINITY;
        if self.noises.is_empty() {
            m = relu_margin(&realize(&self.net, None)?, &batch);
        }
        for n in &self.noises {
            m = m.min(relu_margin(&realize(&self.net, Some(n))?, &batch));
        }
        Ok(m)
    }

    /// Loss with all stored parameters replaced by `flat`.
    pub fn loss_at(&self, flat: &[f64]) -> f64 {
        let mut net = self.net.clone();
        net.set_flat(flat).expect("same layout");
        elbo_loss_with_noise(&net, &self.batch(), &self.prior, self.kl_scale, &self.noises)
            .map(|b| b.loss)
            .unwrap_or(f64::NAN)
    }

    /// Max relative error of the analytic gradient against central
    /// differences over coordinates with |fd| above `floor`.
    pub fn max_rel_err(&self, h: f64, floor: f64) -> Result<(f64, usize)> {
        let (_, grads) = elbo_backward_with_noise(&self.net, &self.batch(), &self.prior, self.kl_scale, &self.noises)?;
        let analytic = grads.to_flat();
        let fd = finite_diff_grad(|p| self.loss_at(p), &self.net.to_flat(), h)?;
        let mut worst = 0.0f64;
        let mut checked = 0;
        for (a, f) in analytic.iter().zip(&fd) {
            if f.abs() > floor {
                worst = worst.max(rel_err(*a, *f, 0.0));
                checked += 1;
            } else if (a - f).abs() > floor {
                // analytic gradient is large where the loss is flat
                worst = f64::INFINITY;
            }
        }
        Ok((worst, checked))
    }
}

/// Run `n_nets` Bayesian cases plus one deterministic plain-backprop case.
pub fn gradcheck(seed: u64, n_nets: usize) -> Result<GradcheckReport> {
    let root = SeedPath::new(seed).purpose(crate::numkernel::Purpose::Check);
    let mut report = GradcheckReport {
        cases: 0,
        coords_checked: 0,
        max_rel_err: 0.0,
    };
    for i in 0..=n_nets {
        let mode = if i < n_nets {
            Mode::Bayesian
        } else {
            Mode::Deterministic
        };
        let mut rng = derive_rng(&root.child(i as u64));
        let case = GradcheckCase::random(&mut rng, mode, 1e-3)?;
        let (err, n) = case.max_rel_err(1e-5, 1e-6)?;
        report.cases += 1;
        report.coords_checked += n;
        report.max_rel_err = report.max_rel_err.max(err);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlcheckReport {
    pub cases: usize,
    pub max_abs_err: f64,
}

impl KlcheckReport {
    pub fn passed(&self) -> bool {
        self.max_abs_err <= KLCHECK_TOL
    }
}

/// `∫ q ln(q/p)` with composite Simpson on `μ_q ± 14σ_q`.
pub fn kl_by_quadrature(mu_q: f64, s_q: f64, mu_p: f64, s_p: f64) -> f64 {
    let log_n = |x: f64, m: f64, s: f64| {
        let z = (x - m) / s;
        -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    };
    let f = |x: f64| {
        let lq = log_n(x, mu_q, s_q);
        lq.exp() * (lq - log_n(x, mu_p, s_p))
    };
    let (lo, hi) = (mu_q - 14.0 * s_q, mu_q + 14.0 * s_q);
    let n = 40_000;
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// Closed-form KL against quadrature on `cases` random scalar pairs.
pub fn klcheck(seed: u64, cases: usize) -> KlcheckReport {
    let mut rng = derive_rng(
        &SeedPath::new(seed)
            .purpose(crate::numkernel::Purpose::Check)
            .child(u64::MAX),
    );
    let mut max_abs_err = 0.0f64;
    for _ in 0..cases {
        let mu_q = 4.0 * rng.uniform() - 2.0;
        let s_q = 0.1 + 1.9 * rng.uniform();
        let mu_p = 4.0 * rng.uniform() - 2.0;
        let s_p = 0.3 + 1.7 * rng.uniform();
        let err = (kl_gauss(mu_q, s_q, mu_p, s_p) - kl_by_quadrature(mu_q, s_q, mu_p, s_p)).abs();
        max_abs_err = max_abs_err.max(err);
    }
    KlcheckReport { cases, max_abs_err }
}
