//! Reparameterized sampling, the negative-ELBO loss and its pathwise gradient.
//!
//! A training loss is `nll + kl_scale · KL(q ‖ p)` where `nll` is the
//! Monte-Carlo average (over `n_mc` weight samples) of the batch-mean softmax
//! cross-entropy. One weight sample is shared by the whole batch.

use super::kl::kl_gauss;
use super::{Mode, Prior, VariationalLayer, VariationalNet};
use crate::numkernel::{affine_into, softmax_into, softmax_xent_into, softplus_deriv, RngStream, Tensor1, Tensor2};
use crate::{Error, Result};

/// Borrowed minibatch: feature rows and their labels.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    rows: Vec<&'a [f64]>,
    labels: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn new(rows: Vec<&'a [f64]>, labels: Vec<usize>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::dim(
                format!("{} rows", rows.len()),
                format!("{} labels", labels.len()),
            ));
        }
        if rows.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        Ok(Self { rows, labels })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[&'a [f64]] {
        &self.rows
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Standard-normal ε for every weight, per layer (W then b).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightNoise {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl WeightNoise {
    pub fn draw(net: &VariationalNet, rng: &mut RngStream) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| {
                let w = (0..l.mu_w.as_slice().len()).map(|_| rng.normal()).collect();
                let b = (0..l.mu_b.len()).map(|_| rng.normal()).collect();
                (w, b)
            })
            .collect();
        Self { layers }
    }
}

/// Concrete weights `w = μ + σ·ε` plus the ε they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedWeights {
    pub layers: Vec<(Tensor2, Tensor1)>,
    /// `None` when the network is deterministic (ε ≡ 0).
    pub noise: Option<WeightNoise>,
}

impl RealizedWeights {
    fn shapes_match(&self, net: &VariationalNet) -> bool {
        self.layers.len() == net.layers().len()
            && self
                .layers
                .iter()
                .zip(net.layers())
                .all(|((w, b), l)| w.shape() == l.mu_w.shape() && b.len() == l.mu_b.len())
    }
}

/// Build weights from given noise; deterministic nets always use μ.
pub fn realize(net: &VariationalNet, noise: Option<&WeightNoise>) -> Result<RealizedWeights> {
    match (net.mode(), noise) {
        (Mode::Bayesian, Some(n)) => realize_spread(net, Some(n), &Spread::of(net)),
        _ => realize_spread(net, None, &Spread::default()),
    }
}

/// σ = softplus(ρ) and dσ/dρ for every parameter, computed once per step.
#[derive(Debug, Default)]
struct Spread {
    /// Per layer: (σ_W, σ'_W, σ_b, σ'_b).
    layers: Vec<[Vec<f64>; 4]>,
}

impl Spread {
    fn of(net: &VariationalNet) -> Self {
        let eval = |rho: &[f64]| -> (Vec<f64>, Vec<f64>) {
            rho.iter()
                .map(|&r| {
                    if r > 30.0 {
                        (r, softplus_deriv(r))
                    } else {
                        let e = r.exp();
                        let d = if r >= 0.0 { softplus_deriv(r) } else { e / (1.0 + e) };
                        (e.ln_1p(), d)
                    }
                })
                .unzip()
        };
        let layers = net
            .layers()
            .iter()
            .map(|l| {
                let (sw, dw) = eval(l.rho_w.as_slice());
                let (sb, db) = eval(l.rho_b.as_slice());
                [sw, dw, sb, db]
            })
            .collect();
        Self { layers }
    }

    /// Closed-form KL, summed in the same order as `kl_diag_gauss`.
    fn kl(&self, net: &VariationalNet, prior: &Prior) -> f64 {
        let mut total = 0.0;
        for (l, [sw, _, sb, _]) in net.layers().iter().zip(&self.layers) {
            let pairs = l.mu_w.as_slice().iter().zip(sw).chain(l.mu_b.as_slice().iter().zip(sb));
            for (&mu, &sigma) in pairs {
                total += kl_gauss(mu, sigma, prior.mu0, prior.sigma0);
            }
        }
        total
    }
}

fn realize_spread(net: &VariationalNet, noise: Option<&WeightNoise>, spread: &Spread) -> Result<RealizedWeights> {
    let noise = match net.mode() {
        Mode::Deterministic => None,
        Mode::Bayesian => noise,
    };
    let mut layers = Vec::with_capacity(net.layers().len());
    for (i, l) in net.layers().iter().enumerate() {
        let (mut w, mut b) = (l.mu_w.clone(), l.mu_b.clone());
        if let Some(n) = noise {
            let (ew, eb) = n
                .layers
                .get(i)
                .filter(|(ew, eb)| ew.len() == w.as_slice().len() && eb.len() == b.len())
                .ok_or_else(|| Error::dim(format!("layer {i} of net"), "noise shape"))?;
            let [sw, _, sb, _] = &spread.layers[i];
            perturb(w.as_mut_slice(), sw, ew);
            perturb(b.as_mut_slice(), sb, eb);
        }
        layers.push((w, b));
    }
    Ok(RealizedWeights {
        layers,
        noise: noise.cloned(),
    })
}

fn perturb(mu: &mut [f64], sigma: &[f64], eps: &[f64]) {
    for ((m, &s), &e) in mu.iter_mut().zip(sigma).zip(eps) {
        *m += s * e;
    }
}

/// Draw one weight realization from q. Deterministic nets return μ and
/// consume no randomness.
pub fn sample_weights(net: &VariationalNet, rng: &mut RngStream) -> RealizedWeights {
    match net.mode() {
        Mode::Deterministic => realize(net, None).expect("μ always matches its own net"),
        Mode::Bayesian => {
            let noise = WeightNoise::draw(net, rng);
            realize(net, Some(&noise)).expect("noise drawn from this net")
        }
    }
}

/// Logits of one input under concrete weights.
pub fn forward(weights: &RealizedWeights, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let last = weights.layers.len() - 1;
    for (i, (w, b)) in weights.layers.iter().enumerate() {
        let mut z = vec![0.0; w.rows()];
        affine_into(w.as_slice(), b.as_slice(), &a, &mut z);
        if i < last {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        a = z;
    }
    a
}

/// Smallest |pre-activation| of any hidden unit over the batch. Finite
/// differences are only meaningful when this is comfortably above the step.
pub fn relu_margin(weights: &RealizedWeights, batch: &Batch<'_>) -> f64 {
    let last = weights.layers.len() - 1;
    let mut margin = f64::INFINITY;
    for x in batch.rows() {
        let mut a = x.to_vec();
        for (i, (w, b)) in weights.layers.iter().enumerate() {
            let mut z = vec![0.0; w.rows()];
            affine_into(w.as_slice(), b.as_slice(), &a, &mut z);
            if i < last {
                for v in &mut z {
                    margin = margin.min(v.abs());
                    *v = v.max(0.0);
                }
            }
            a = z;
        }
    }
    margin
}

/// Batch-mean cross-entropy and, optionally, its gradient w.r.t. the realized
/// weights (per layer: dW, db).
fn nll_pass(weights: &RealizedWeights, batch: &Batch<'_>, with_grad: bool) -> (f64, Option<Vec<(Vec<f64>, Vec<f64>)>>) {
    let n_layers = weights.layers.len();
    let mut grads: Option<Vec<(Vec<f64>, Vec<f64>)>> = with_grad.then(|| {
        weights
            .layers
            .iter()
            .map(|(w, b)| (vec![0.0; w.as_slice().len()], vec![0.0; b.len()]))
            .collect()
    });
    // acts[0] = input, acts[i+1] = output of layer i (post-ReLU for hidden)
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
    acts.push(Vec::new());
    for (w, _) in &weights.layers {
        acts.push(vec![0.0; w.rows()]);
    }
    let max_width = weights
        .layers
        .iter()
        .map(|(w, _)| w.rows().max(w.cols()))
        .max()
        .unwrap_or(0);
    let mut delta = vec![0.0; max_width];
    let mut delta_prev = vec![0.0; max_width];

    let mut total = 0.0;
    for (x, &y) in batch.rows().iter().zip(batch.labels()) {
        acts[0].clear();
        acts[0].extend_from_slice(x);
        for (i, (w, b)) in weights.layers.iter().enumerate() {
            let (head, tail) = acts.split_at_mut(i + 1);
            let out = &mut tail[0];
            affine_into(w.as_slice(), b.as_slice(), &head[i], out);
            if i + 1 < n_layers {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        let n_out = weights.layers[n_layers - 1].0.rows();
        total += softmax_xent_into(&acts[n_layers], y, &mut delta[..n_out]);

        let Some(grads) = grads.as_mut() else { continue };
        let mut width = n_out;
        for i in (0..n_layers).rev() {
            let (w, _) = &weights.layers[i];
            let input = &acts[i];
            let cols = w.cols();
            let (gw, gb) = &mut grads[i];
            for r in 0..width {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                gb[r] += d;
                let row = &mut gw[r * cols..(r + 1) * cols];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if i == 0 {
                break;
            }
            // back through W then the ReLU of layer i-1
            let prev = &mut delta_prev[..cols];
            prev.fill(0.0);
            let wv = w.as_slice();
            for r in 0..width {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                for (p, &wrc) in prev.iter_mut().zip(&wv[r * cols..(r + 1) * cols]) {
                    *p += d * wrc;
                }
            }
            for (p, &a) in prev.iter_mut().zip(input.iter()) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
            std::mem::swap(&mut delta, &mut delta_prev);
            width = cols;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    if let Some(g) = grads.as_mut() {
        for (gw, gb) in g.iter_mut() {
            gw.iter_mut().chain(gb.iter_mut()).for_each(|v| *v *= inv);
        }
    }
    (total * inv, grads)
}

/// Loss decomposition of one negative-ELBO evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    pub nll: f64,
    pub kl: f64,
    pub kl_scale: f64,
    pub loss: f64,
}

/// ∂loss/∂parameter laid out like the network (μ and ρ per tensor).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<VariationalLayer>,
}

impl Gradients {
    pub fn zeros_like(net: &VariationalNet) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| VariationalLayer::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    /// Same ordering as [`VariationalNet::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            for s in l.slices() {
                out.extend_from_slice(s);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.slices().iter().all(|s| s.iter().all(|v| v.is_finite())))
    }
}

fn check_args(n_mc: usize, kl_scale: f64) -> Result<()> {
    if n_mc == 0 {
        return Err(Error::Argument("n_mc must be >= 1".into()));
    }
    if !(kl_scale >= 0.0) || !kl_scale.is_finite() {
        return Err(Error::Argument(format!(
            "kl_scale must be finite and >= 0, got {kl_scale}"
        )));
    }
    Ok(())
}

fn draw_noises(net: &VariationalNet, n_mc: usize, rng: &mut RngStream) -> Vec<WeightNoise> {
    match net.mode() {
        Mode::Deterministic => Vec::new(),
        Mode::Bayesian => (0..n_mc).map(|_| WeightNoise::draw(net, rng)).collect(),
    }
}

fn kl_term(net: &VariationalNet, prior: &Prior, spread: &Spread) -> Result<f64> {
    match net.mode() {
        Mode::Deterministic => Ok(0.0),
        Mode::Bayesian => {
            if !(prior.sigma0 > 0.0) {
                return Err(Error::Argument(format!("sigma0 must be > 0, got {}", prior.sigma0)));
            }
            Ok(spread.kl(net, prior))
        }
    }
}

/// Negative ELBO with `n_mc` fresh weight samples drawn from `rng`.
pub fn elbo_loss(
    net: &VariationalNet,
    batch: &Batch<'_>,
    prior: &Prior,
    n_mc: usize,
    kl_scale: f64,
    rng: &mut RngStream,
) -> Result<ElboBreakdown> {
    check_args(n_mc, kl_scale)?;
    let noises = draw_noises(net, n_mc, rng);
    elbo_loss_with_noise(net, batch, prior, kl_scale, &noises)
}

/// Negative ELBO under frozen noise. Deterministic nets ignore `noises`;
/// Bayesian nets need at least one sample.
pub fn elbo_loss_with_noise(
    net: &VariationalNet,
    batch: &Batch<'_>,
    prior: &Prior,
    kl_scale: f64,
    noises: &[WeightNoise],
) -> Result<ElboBreakdown> {
    let spread = spread_for(net);
    let realizations = realizations(net, noises, kl_scale, &spread)?;
    let mut nll = 0.0;
    for w in &realizations {
        nll += nll_pass(w, batch, false).0;
    }
    nll /= realizations.len() as f64;
    let kl = kl_term(net, prior, &spread)?;
    Ok(ElboBreakdown {
        nll,
        kl,
        kl_scale,
        loss: nll + kl_scale * kl,
    })
}

fn realizations(
    net: &VariationalNet,
    noises: &[WeightNoise],
    kl_scale: f64,
    spread: &Spread,
) -> Result<Vec<RealizedWeights>> {
    check_args(noises.len().max(1), kl_scale)?;
    match net.mode() {
        Mode::Deterministic => Ok(vec![realize_spread(net, None, spread)?]),
        Mode::Bayesian => {
            if noises.is_empty() {
                return Err(Error::Argument("bayesian loss needs at least one noise sample".into()));
            }
            noises.iter().map(|n| realize_spread(net, Some(n), spread)).collect()
        }
    }
}

fn spread_for(net: &VariationalNet) -> Spread {
    match net.mode() {
        Mode::Deterministic => Spread::default(),
        Mode::Bayesian => Spread::of(net),
    }
}

/// Loss and pathwise gradient, drawing noise from `rng` exactly as
/// [`elbo_loss`] would.
pub fn elbo_backward(
    net: &VariationalNet,
    batch: &Batch<'_>,
    prior: &Prior,
    n_mc: usize,
    kl_scale: f64,
    rng: &mut RngStream,
) -> Result<(ElboBreakdown, Gradients)> {
    check_args(n_mc, kl_scale)?;
    let noises = draw_noises(net, n_mc, rng);
    elbo_backward_with_noise(net, batch, prior, kl_scale, &noises)
}

/// Pathwise gradient under frozen noise.
///
/// With `w = μ + softplus(ρ)·ε`:
/// `∂/∂μ = ∂nll/∂w + s·(μ − μ₀)/σ₀²` and
/// `∂/∂ρ = (∂nll/∂w·ε + s·(σ/σ₀² − 1/σ))·logistic(ρ)`.
pub fn elbo_backward_with_noise(
    net: &VariationalNet,
    batch: &Batch<'_>,
    prior: &Prior,
    kl_scale: f64,
    noises: &[WeightNoise],
) -> Result<(ElboBreakdown, Gradients)> {
    let spread = spread_for(net);
    let realizations = realizations(net, noises, kl_scale, &spread)?;
    let mut grads = Gradients::zeros_like(net);
    let inv_mc = 1.0 / realizations.len() as f64;
    let mut nll = 0.0;
    for w in &realizations {
        let (loss, g) = nll_pass(w, batch, true);
        nll += loss;
        let g = g.expect("gradient requested");
        for (li, (gw, gb)) in g.iter().enumerate() {
            let out = &mut grads.layers[li];
            accumulate(out.mu_w.as_mut_slice(), gw, inv_mc);
            accumulate(out.mu_b.as_mut_slice(), gb, inv_mc);
            if let Some(noise) = &w.noise {
                let (ew, eb) = &noise.layers[li];
                let [_, dw, _, db] = &spread.layers[li];
                accumulate_rho(out.rho_w.as_mut_slice(), gw, ew, dw, inv_mc);
                accumulate_rho(out.rho_b.as_mut_slice(), gb, eb, db, inv_mc);
            }
        }
    }
    nll *= inv_mc;

    let kl = kl_term(net, prior, &spread)?;
    if net.mode() == Mode::Bayesian && kl_scale != 0.0 {
        let var0 = prior.sigma0 * prior.sigma0;
        for ((layer, out), [sw, dw, sb, db]) in net.layers().iter().zip(&mut grads.layers).zip(&spread.layers) {
            let kw = KlGrad {
                mu: layer.mu_w.as_slice(),
                sigma: sw,
                dsigma: dw,
            };
            kw.add(
                out.mu_w.as_mut_slice(),
                out.rho_w.as_mut_slice(),
                prior.mu0,
                var0,
                kl_scale,
            );
            let kb = KlGrad {
                mu: layer.mu_b.as_slice(),
                sigma: sb,
                dsigma: db,
            };
            kb.add(
                out.mu_b.as_mut_slice(),
                out.rho_b.as_mut_slice(),
                prior.mu0,
                var0,
                kl_scale,
            );
        }
    }
    let bd = ElboBreakdown {
        nll,
        kl,
        kl_scale,
        loss: nll + kl_scale * kl,
    };
    Ok((bd, grads))
}

fn accumulate(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn accumulate_rho(dst: &mut [f64], gw: &[f64], eps: &[f64], dsigma: &[f64], scale: f64) {
    for (((d, &g), &e), &ds) in dst.iter_mut().zip(gw).zip(eps).zip(dsigma) {
        *d += scale * g * e * ds;
    }
}

struct KlGrad<'a> {
    mu: &'a [f64],
    sigma: &'a [f64],
    dsigma: &'a [f64],
}

impl KlGrad<'_> {
    fn add(&self, gmu: &mut [f64], grho: &mut [f64], mu0: f64, var0: f64, s: f64) {
        let params = self.mu.iter().zip(self.sigma).zip(self.dsigma);
        for ((gm, gr), ((&m, &sigma), &ds)) in gmu.iter_mut().zip(grho.iter_mut()).zip(params) {
            *gm += s * (m - mu0) / var0;
            *gr += s * (sigma / var0 - 1.0 / sigma) * ds;
        }
    }
}

/// `p ← p − lr·∂loss/∂p` for every stored parameter.
pub fn sgd_step(net: &mut VariationalNet, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Argument(format!(
            "learning rate must be finite and >= 0, got {lr}"
        )));
    }
    if grads.layers.len() != net.layers().len()
        || grads
            .layers
            .iter()
            .zip(net.layers())
            .any(|(g, l)| g.mu_w.shape() != l.mu_w.shape() || g.mu_b.len() != l.mu_b.len())
    {
        return Err(Error::dim(format!("net {:?}", net.sizes()), "gradient shapes"));
    }
    if lr == 0.0 {
        return Ok(());
    }
    for (layer, g) in net.layers_mut().iter_mut().zip(&grads.layers) {
        for (p, gs) in layer.slices_mut().into_iter().zip(g.slices()) {
            for (v, &d) in p.iter_mut().zip(gs) {
                *v -= lr * d;
            }
        }
    }
    Ok(())
}

/// Posterior predictive for one input: mean softmax over `n_mc` samples.
pub fn predict(net: &VariationalNet, x: &[f64], n_mc: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    Ok(predictive(net, &[x], n_mc, rng)?
        .pop()
        .expect("one row in, one row out"))
}

/// Posterior predictive for many inputs. The `n_mc` weight samples are drawn
/// once and shared across all rows.
pub fn predictive(net: &VariationalNet, rows: &[&[f64]], n_mc: usize, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
    if n_mc == 0 {
        return Err(Error::Argument("n_mc must be >= 1".into()));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != net.input_dim()) {
        return Err(Error::dim(
            format!("input dim {}", net.input_dim()),
            format!("row of {}", bad.len()),
        ));
    }
    let n_mc = match net.mode() {
        Mode::Deterministic => 1,
        Mode::Bayesian => n_mc,
    };
    let c = net.n_classes();
    let mut out = vec![vec![0.0; c]; rows.len()];
    let mut probs = vec![0.0; c];
    for _ in 0..n_mc {
        let w = sample_weights(net, rng);
        debug_assert!(w.shapes_match(net));
        for (x, acc) in rows.iter().zip(out.iter_mut()) {
            softmax_into(&forward(&w, x), &mut probs);
            for (a, p) in acc.iter_mut().zip(&probs) {
                *a += p;
            }
        }
    }
    let inv = 1.0 / n_mc as f64;
    for acc in &mut out {
        acc.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

/// Accuracy and mean cross-entropy of the averaged predictive distribution.
///
/// Predictions take the first class on probability ties. A predicted
/// probability of exactly 0 for the true label is floored at the smallest
/// normal f64 so the loss stays finite; NaN probabilities propagate.
pub fn score(
    net: &VariationalNet,
    rows: &[&[f64]],
    labels: &[usize],
    n_mc: usize,
    rng: &mut RngStream,
) -> Result<(f64, f64)> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if rows.len() != labels.len() {
        return Err(Error::dim(
            format!("{} rows", rows.len()),
            format!("{} labels", labels.len()),
        ));
    }
    let probs = predictive(net, rows, n_mc, rng)?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        if y >= p.len() {
            return Err(Error::Index { index: y, len: p.len() });
        }
        if crate::numkernel::argmax(p) == y {
            correct += 1;
        }
        let py = p[y];
        loss -= if py.is_nan() {
            py
        } else {
            py.max(f64::MIN_POSITIVE).ln()
        };
    }
    let n = rows.len() as f64;
    Ok((correct as f64 / n, loss / n))
}
