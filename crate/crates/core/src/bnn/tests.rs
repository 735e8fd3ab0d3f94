use super::check::GradcheckCase;
use super::*;
use crate::numkernel::{
    argmax, derive_rng, finite_diff_grad, softmax, softplus_inv, RngStream, SeedPath, Tensor1, Tensor2,
};

fn rng(seed: u64) -> RngStream {
    derive_rng(&SeedPath::new(seed))
}

fn one_layer(w: &[f64], b: &[f64], classes: usize, rho: f64) -> VariationalNet {
    let inputs = w.len() / classes;
    let layer = VariationalLayer::new(
        Tensor2::from_vec(classes, inputs, w.to_vec()).unwrap(),
        Tensor2::filled(classes, inputs, rho),
        Tensor1::from(b.to_vec()),
        Tensor1::from(vec![rho; classes]),
    )
    .unwrap();
    VariationalNet::from_layers(vec![layer], Mode::Bayesian).unwrap()
}

#[test]
fn vanishing_variance_samples_mean() {
    let mut r = rng(1);
    let mut net = VariationalNet::init(&[3, 5, 2], Mode::Bayesian, 0.1, &mut r).unwrap();
    net.fill_rho(-40.0);
    let w = sample_weights(&net, &mut r);
    for ((sw, sb), l) in w.layers.iter().zip(net.layers()) {
        for (a, b) in sw.as_slice().iter().zip(l.mu_w.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in sb.as_slice().iter().zip(l.mu_b.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn sampling_is_deterministic_per_stream() {
    let net = VariationalNet::init(&[3, 4, 2], Mode::Bayesian, 0.3, &mut rng(2)).unwrap();
    let a = sample_weights(&net, &mut rng(77));
    let b = sample_weights(&net, &mut rng(77));
    assert_eq!(a, b);
    let c = sample_weights(&net, &mut rng(78));
    assert_ne!(a, c);
}

#[test]
fn deterministic_sampling_returns_mu() {
    let net = VariationalNet::init(&[3, 4, 2], Mode::Deterministic, 0.3, &mut rng(2)).unwrap();
    let w = sample_weights(&net, &mut rng(5));
    assert!(w.noise.is_none());
    assert_eq!(w.layers[0].0, net.layers()[0].mu_w);
}

#[test]
fn sampled_weight_moments() {
    // μ = 0, σ = 1 for the first weight
    let net = one_layer(&[0.0, 0.0], &[0.0, 0.0], 2, softplus_inv(1.0).unwrap());
    let mut r = rng(3);
    let n = 100_000;
    let xs: Vec<f64> = (0..n)
        .map(|_| sample_weights(&net, &mut r).layers[0].0.get(0, 0))
        .collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!(mean.abs() <= 0.02, "{mean}");
    assert!((0.97..=1.03).contains(&var), "{var}");
}

#[test]
fn zero_weights_give_log_c() {
    let c = 5;
    let layer = VariationalLayer::zeros(3, c);
    let net = VariationalNet::from_layers(vec![layer], Mode::Deterministic).unwrap();
    let x = [0.3, -1.0, 2.0];
    let batch = Batch::new(vec![&x[..], &x[..]], vec![0, 4]).unwrap();
    let bd = elbo_loss(&net, &batch, &Prior::default(), 7, 1.0, &mut rng(0)).unwrap();
    assert!((bd.nll - (c as f64).ln()).abs() < 1e-12);
    assert_eq!(bd.kl, 0.0);
    assert!((bd.loss - bd.nll).abs() == 0.0);
}

#[test]
fn degenerate_posterior_matches_deterministic() {
    let mut r = rng(4);
    let mut net = VariationalNet::init(&[4, 6, 3], Mode::Bayesian, 0.1, &mut r).unwrap();
    net.fill_rho(-40.0);
    let xs: Vec<Vec<f64>> = (0..8).map(|_| (0..4).map(|_| r.normal()).collect()).collect();
    let batch = Batch::new(xs.iter().map(|x| x.as_slice()).collect(), vec![0, 1, 2, 0, 1, 2, 0, 1]).unwrap();
    let bayes = elbo_loss(&net, &batch, &Prior::default(), 3, 0.0, &mut r).unwrap();
    let det = elbo_loss(
        &net.clone().with_mode(Mode::Deterministic),
        &batch,
        &Prior::default(),
        1,
        0.0,
        &mut r,
    )
    .unwrap();
    assert!((bayes.nll - det.nll).abs() < 1e-8);

    // predictions too
    let p_b = predictive(&net, batch.rows(), 10, &mut r).unwrap();
    let p_d = predictive(&net.clone().with_mode(Mode::Deterministic), batch.rows(), 10, &mut r).unwrap();
    for (a, b) in p_b.iter().zip(&p_d) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-8);
        }
    }
}

/// Gauss-Hermite-free oracle: Simpson over w ∈ μ ± 12σ of N(w; μ, σ)·g(w).
fn gauss_expect(mu: f64, sigma: f64, g: impl Fn(f64) -> f64) -> f64 {
    let (lo, hi) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let dens = |w: f64| {
        let z = (w - mu) / sigma;
        (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    };
    let f = |w: f64| dens(w) * g(w);
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

#[test]
fn monte_carlo_loss_agrees_with_quadrature() {
    // Only W[0,0] is uncertain (σ = 0.8); everything else has σ ≈ 4e-18.
    let frozen = -40.0;
    let (mu, sigma) = (0.7, 0.8);
    let mut net = one_layer(&[mu, -0.3], &[0.1, -0.2], 2, frozen);
    net.layers_mut()[0].rho_w.set(0, 0, softplus_inv(sigma).unwrap());
    let xs = [[1.5], [-0.5], [0.8]];
    let ys = [0usize, 1, 1];
    let batch = Batch::new(xs.iter().map(|x| &x[..]).collect(), ys.to_vec()).unwrap();
    let prior = Prior::default();

    let nll_at = |w: f64| {
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(&ys) {
            let z = [w * x[0] + 0.1, -0.3 * x[0] - 0.2];
            let m = z[0].max(z[1]);
            let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
            total += lse - z[y];
        }
        total / xs.len() as f64
    };
    let mean = gauss_expect(mu, sigma, nll_at);
    let second = gauss_expect(mu, sigma, |w| nll_at(w).powi(2));
    let se = ((second - mean * mean) / 1e4).sqrt();

    // KL written out independently: one σ=0.8 weight plus three frozen ones
    let kl1 = |m: f64, s: f64| -s.ln() + (s * s + m * m) / 2.0 - 0.5;
    let s_frozen = frozen.exp().ln_1p();
    let kl = kl1(mu, sigma) + kl1(-0.3, s_frozen) + kl1(0.1, s_frozen) + kl1(-0.2, s_frozen);

    let kl_scale = 0.01;
    let bd = elbo_loss(&net, &batch, &prior, 10_000, kl_scale, &mut rng(9)).unwrap();
    let exact = mean + kl_scale * kl;
    assert!((bd.kl - kl).abs() < 1e-9 * kl.abs());
    assert!(
        (bd.loss - exact).abs() <= 3.0 * se,
        "loss {} exact {} se {}",
        bd.loss,
        exact,
        se
    );
}

#[test]
fn deterministic_backward_is_plain_backprop() {
    let mut r = rng(11);
    let case = GradcheckCase::random(&mut r, Mode::Deterministic, 1e-3).unwrap();
    let (_, grads) = elbo_backward_with_noise(&case.net, &case.batch(), &case.prior, 0.0, &[]).unwrap();
    let fd = finite_diff_grad(|p| case.loss_at(p), &case.net.to_flat(), 1e-5).unwrap();
    let a = grads.to_flat();
    let mut checked = 0;
    for (x, y) in a.iter().zip(&fd) {
        if y.abs() > 1e-6 {
            assert!((x - y).abs() / x.abs().max(y.abs()) <= 1e-4, "{x} vs {y}");
            checked += 1;
        } else {
            assert!((x - y).abs() < 1e-6);
        }
    }
    assert!(checked > 0);
    // ρ is inert in deterministic mode
    for l in &grads.layers {
        assert!(l.rho_w.as_slice().iter().chain(l.rho_b.as_slice()).all(|&v| v == 0.0));
    }
}

#[test]
fn kl_gradient_vanishes_at_prior_mean() {
    let prior = Prior::new(0.25, 1.3).unwrap();
    let mut net = VariationalNet::init(&[3, 4, 2], Mode::Bayesian, 0.2, &mut rng(12)).unwrap();
    let mut flat = net.to_flat();
    // set every μ (not ρ) to μ₀
    let mut off = 0;
    for l in net.layers() {
        let [mw, rw, mb, rb] = l.slices().map(|s| s.len());
        flat[off..off + mw].fill(0.25);
        off += mw + rw;
        flat[off..off + mb].fill(0.25);
        off += mb + rb;
    }
    net.set_flat(&flat).unwrap();
    // zero input and zero hidden weights make the nll part of ∂/∂μ nonzero only
    // through biases; isolate the KL by differencing two kl_scales
    let x = [0.0, 0.0, 0.0];
    let batch = Batch::new(vec![&x[..]], vec![1]).unwrap();
    let noise = vec![WeightNoise::draw(&net, &mut rng(13))];
    let (_, g0) = elbo_backward_with_noise(&net, &batch, &prior, 0.0, &noise).unwrap();
    let (_, g1) = elbo_backward_with_noise(&net, &batch, &prior, 1.0, &noise).unwrap();
    for (l0, l1) in g0.layers.iter().zip(&g1.layers) {
        for (a, b) in l0.mu_w.as_slice().iter().zip(l1.mu_w.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in l0.mu_b.as_slice().iter().zip(l1.mu_b.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn bayesian_backward_matches_finite_differences_2_4_3() {
    let mut r = rng(14);
    let mut net = VariationalNet::init(&[2, 4, 3], Mode::Bayesian, 0.2, &mut r).unwrap();
    let mut flat = net.to_flat();
    for v in flat.iter_mut() {
        *v += 0.5 * r.normal();
    }
    net.set_flat(&flat).unwrap();
    // ρ back into a sensible range
    for l in net.layers_mut() {
        for s in [l.rho_w.as_mut_slice(), l.rho_b.as_mut_slice()] {
            for v in s {
                *v = softplus_inv(0.1 + 0.3 * r.uniform()).unwrap();
            }
        }
    }
    let case = loop {
        let inputs: Vec<Vec<f64>> = (0..5).map(|_| vec![r.normal(), r.normal()]).collect();
        let c = GradcheckCase {
            net: net.clone(),
            prior: Prior::new(0.1, 0.9).unwrap(),
            kl_scale: 0.3,
            inputs,
            labels: vec![0, 1, 2, 1, 0],
            noises: vec![WeightNoise::draw(&net, &mut r)],
        };
        let w = realize(&c.net, Some(&c.noises[0])).unwrap();
        if relu_margin(&w, &c.batch()) > 1e-3 {
            break c;
        }
    };
    let (err, checked) = case.max_rel_err(1e-5, 1e-6).unwrap();
    assert!(checked > 40);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn random_nets_gradient_property() {
    let report = check::gradcheck(2024, 10).unwrap();
    assert_eq!(report.cases, 11);
    assert!(report.passed(), "{report:?}");
}

#[test]
fn shared_rng_position_matches_forward() {
    let mut r = rng(15);
    let net = VariationalNet::init(&[3, 4, 2], Mode::Bayesian, 0.3, &mut r).unwrap();
    let x = [0.1, 0.2, 0.3];
    let batch = Batch::new(vec![&x[..]], vec![1]).unwrap();
    let start = rng(99);
    let l = elbo_loss(&net, &batch, &Prior::default(), 3, 0.5, &mut start.clone()).unwrap();
    let (b, _) = elbo_backward(&net, &batch, &Prior::default(), 3, 0.5, &mut start.clone()).unwrap();
    assert_eq!(l, b);
}

#[test]
fn loss_argument_errors() {
    let net = VariationalNet::init(&[2, 2], Mode::Bayesian, 0.3, &mut rng(1)).unwrap();
    let x = [0.0, 0.0];
    let batch = Batch::new(vec![&x[..]], vec![0]).unwrap();
    assert!(elbo_loss(&net, &batch, &Prior::default(), 0, 1.0, &mut rng(1)).is_err());
    assert!(Batch::new(vec![], vec![]).is_err());
}

#[test]
fn sgd_step_examples() {
    let mut r = rng(16);
    let net = VariationalNet::init(&[3, 4, 2], Mode::Bayesian, 0.3, &mut r).unwrap();
    let mut g = Gradients::zeros_like(&net);
    for l in &mut g.layers {
        for s in l.slices_mut() {
            s.iter_mut().for_each(|v| *v = r.normal());
        }
    }
    let mut same = net.clone();
    sgd_step(&mut same, &g, 0.0).unwrap();
    let bits = |n: &VariationalNet| n.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&same), bits(&net));

    let mut single = one_layer(&[1.0, 0.0], &[0.0, 0.0], 2, 0.0);
    let mut g = Gradients::zeros_like(&single);
    g.layers[0].mu_w.set(0, 0, 2.0);
    sgd_step(&mut single, &g, 0.1).unwrap();
    assert!((single.layers()[0].mu_w.get(0, 0) - 0.8).abs() < 1e-15);

    let other = VariationalNet::init(&[3, 5, 2], Mode::Bayesian, 0.3, &mut r).unwrap();
    let mut n = net.clone();
    assert!(sgd_step(&mut n, &Gradients::zeros_like(&other), 0.1).is_err());
    assert!(sgd_step(&mut n, &Gradients::zeros_like(&net), -1.0).is_err());
}

#[test]
fn sgd_step_descends_convex_surrogate() {
    // One weight, zero inputs except a bias: loss(b) = xent([b, 0], 0), convex in b.
    let mut net = one_layer(&[0.0, 0.0], &[0.0, 0.0], 2, -40.0).with_mode(Mode::Deterministic);
    let x = [0.0];
    let batch = Batch::new(vec![&x[..]], vec![0]).unwrap();
    let prior = Prior::default();
    let (before, g) = elbo_backward(&net, &batch, &prior, 1, 0.0, &mut rng(0)).unwrap();
    sgd_step(&mut net, &g, 0.5).unwrap();
    let after = elbo_loss(&net, &batch, &prior, 1, 0.0, &mut rng(0)).unwrap();
    assert!(after.loss < before.loss);
}

#[test]
fn predict_examples() {
    let c = 4;
    let mut net = VariationalNet::from_layers(
        vec![VariationalLayer::zeros(3, 6), VariationalLayer::zeros(6, c)],
        Mode::Bayesian,
    )
    .unwrap();
    net.fill_rho(-40.0);
    let p = predict(&net, &[0.5, 0.1, 0.9], 10, &mut rng(1)).unwrap();
    for v in &p {
        assert!((v - 0.25).abs() < 1e-12);
    }

    let det = VariationalNet::init(&[3, 5, 4], Mode::Deterministic, 0.3, &mut rng(2)).unwrap();
    let x = [0.2, -0.4, 1.0];
    let p = predict(&det, &x, 10, &mut rng(3)).unwrap();
    let w = realize(&det, None).unwrap();
    let direct = softmax(&Tensor1::from(forward(&w, &x)));
    assert_eq!(p, direct.into_vec());

    let bayes = det.with_mode(Mode::Bayesian);
    let a = predict(&bayes, &x, 1, &mut rng(4)).unwrap();
    let b = predict(&bayes, &x, 1, &mut rng(4)).unwrap();
    assert_eq!(a, b);
    let p = predict(&bayes, &x, 25, &mut rng(5)).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

fn two_blobs(r: &mut RngStream, per_class: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let centers = [[0.25, 0.25], [0.75, 0.75]];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (c, ctr) in centers.iter().enumerate() {
        for _ in 0..per_class {
            xs.push(vec![ctr[0] + 0.08 * r.normal(), ctr[1] + 0.08 * r.normal()]);
            ys.push(c);
        }
    }
    (xs, ys)
}

fn train_accuracy(mode: Mode) -> f64 {
    let mut r = rng(17);
    let (xs, ys) = two_blobs(&mut r, 100);
    let mut net = VariationalNet::init(&[2, 8, 2], mode, INIT_SIGMA, &mut r).unwrap();
    let prior = Prior::default();
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    for step in 0..200 {
        if step % (n / 20) == 0 {
            r.shuffle(&mut order);
        }
        let start = (step % (n / 20)) * 20;
        let idx = &order[start..start + 20];
        let batch = Batch::new(
            idx.iter().map(|&i| xs[i].as_slice()).collect(),
            idx.iter().map(|&i| ys[i]).collect(),
        )
        .unwrap();
        let (_, g) = elbo_backward(&net, &batch, &prior, 1, 1.0 / n as f64, &mut r).unwrap();
        sgd_step(&mut net, &g, 0.5).unwrap();
    }
    let rows: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let probs = predictive(&net, &rows, 10, &mut r).unwrap();
    let correct = probs.iter().zip(&ys).filter(|(p, &y)| argmax(p) == y).count();
    correct as f64 / n as f64
}

#[test]
fn training_sanity_separable_blobs() {
    let det = train_accuracy(Mode::Deterministic);
    let bayes = train_accuracy(Mode::Bayesian);
    assert!(det >= 0.95, "deterministic {det}");
    assert!(bayes >= 0.9, "bayesian {bayes}");
}
