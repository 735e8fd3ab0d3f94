use super::*;
use crate::bnn::{score, Mode, Prior, VariationalLayer, VariationalNet, INIT_SIGMA};
use crate::datahub::{make_shards, partition_dirichlet_min, synth_blobs, Dataset};
use crate::exec::Exec;
use crate::numkernel::{derive_rng, Purpose, SeedPath};
use crate::Error;

fn blob_clients(n: usize, seed: u64, candidates: Candidates) -> (Vec<ClientState>, usize, usize) {
    let ds = synth_blobs(4, 6, 60, 0.3, seed).unwrap();
    let part = partition_dirichlet_min(&ds, n.max(2), 1.0, 20, seed).unwrap();
    let clients = (0..n)
        .map(|i| {
            let shards = make_shards(&part.client_dataset(&ds, i), seed + i as u64).unwrap();
            ClientState::new(
                i,
                shards,
                candidates.clone(),
                LocalConfig::default(),
                SeedPath::new(seed),
            )
            .unwrap()
        })
        .collect();
    (clients, ds.dim(), ds.n_classes())
}

fn global(dim: usize, classes: usize, mode: Mode, seed: u64) -> GlobalModel {
    let mut rng = derive_rng(&SeedPath::new(seed).purpose(Purpose::Init));
    GlobalModel::new(VariationalNet::init(&[dim, 16, classes], mode, INIT_SIGMA, &mut rng).unwrap())
}

fn default_candidates() -> Candidates {
    Candidates::Fixed(vec![0.0001, 0.001, 0.01])
}

#[test]
fn selection_over_default_candidates() {
    let (clients, d, c) = blob_clients(2, 1, default_candidates());
    let g = global(d, c, Mode::Bayesian, 1);
    let sel = meta_select_lr(&clients[0], &g, &Prior::default(), Exec::Sequential).unwrap();
    assert_eq!(sel.losses.len(), 3);
    assert!(sel.losses.iter().all(|l| l.is_finite()));
    assert!([0.0001, 0.001, 0.01].contains(&sel.best_lr));
    assert_eq!(sel.best_lr, sel.candidates[sel.best_index]);
}

#[test]
fn selection_is_repeatable_and_leaves_global_untouched() {
    let (clients, d, c) = blob_clients(2, 2, Candidates::Fixed(vec![0.5, 0.05, 0.005]));
    let g = global(d, c, Mode::Bayesian, 2);
    let before = g.clone();
    let a = meta_select_lr(&clients[1], &g, &Prior::default(), Exec::Parallel).unwrap();
    let b = meta_select_lr(&clients[1], &g, &Prior::default(), Exec::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(g, before);
}

#[test]
fn single_candidate_wins_by_default() {
    let sel = LrSelection::from_losses(&[0.3], &[f64::NAN]).unwrap();
    assert_eq!(sel.best_index, 0);
    let (clients, d, c) = blob_clients(2, 3, Candidates::Fixed(vec![0.02]));
    let sel = meta_select_lr(
        &clients[0],
        &global(d, c, Mode::Bayesian, 3),
        &Prior::default(),
        Exec::Sequential,
    )
    .unwrap();
    assert_eq!((sel.best_index, sel.best_lr), (0, 0.02));
}

#[test]
fn selection_seam_takes_argmin() {
    let sel = LrSelection::from_losses(&[0.1, 0.2, 0.3], &[0.9, 0.5, 0.7]).unwrap();
    assert_eq!((sel.best_index, sel.best_lr), (1, 0.2));
    let sel = LrSelection::from_losses(&[0.1, 0.2, 0.3], &[0.5, 0.5, 0.7]).unwrap();
    assert_eq!(sel.best_index, 0);
    let sel = LrSelection::from_losses(&[0.1, 0.2], &[f64::NAN, 3.0]).unwrap();
    assert_eq!(sel.losses[0], f64::INFINITY);
    assert_eq!(sel.best_index, 1);
    let err = LrSelection::from_losses(&[0.1, 0.2], &[f64::NAN, f64::INFINITY]).unwrap_err();
    assert!(err.is_divergence());
    assert!(LrSelection::from_losses(&[0.1], &[]).is_err());
}

#[test]
fn diverging_candidate_is_excluded() {
    let (clients, d, c) = blob_clients(2, 4, Candidates::Fixed(vec![1e12, 0.01]));
    let sel = meta_select_lr(
        &clients[0],
        &global(d, c, Mode::Bayesian, 4),
        &Prior::default(),
        Exec::Sequential,
    )
    .unwrap();
    assert_eq!(sel.losses[0], f64::INFINITY);
    assert_eq!(sel.best_lr, 0.01);
}

#[test]
fn local_training_prefix_property() {
    let (clients, d, c) = blob_clients(2, 5, default_candidates());
    let g = global(d, c, Mode::Bayesian, 5);
    let mut one = clients[0].clone();
    one.config.local_epochs = 1;
    let mut two = clients[0].clone();
    two.config.local_epochs = 2;
    let net1 = local_train(&one, &g, 0.05, &Prior::default()).unwrap();
    let net2 = local_train(&two, &g, 0.05, &Prior::default()).unwrap();
    assert_ne!(net1, net2);

    // replay the two-epoch run and capture the state after epoch 1
    let plan = SgdPlan {
        lr: 0.05,
        epochs: 2,
        batch_size: two.config.batch_size,
        n_mc: two.config.n_mc_train,
        kl_scale: two.kl_scale(),
        prior: &Prior::default(),
    };
    let path = |p| two.seed.client_round(1, two.id as u64, p);
    let mut order = derive_rng(&path(Purpose::BatchOrder));
    let mut noise = derive_rng(&path(Purpose::LocalTrain));
    let mut net = g.net.clone();
    let mut after_first = None;
    train_epochs(&mut net, two.training_set(), plan, &mut order, &mut noise, |e, n, _| {
        if e == 1 {
            after_first = Some(n.clone());
        }
    })
    .unwrap()
    .unwrap();
    assert_eq!(after_first.unwrap(), net1);
    assert_eq!(net, net2);
}

#[test]
fn vanishing_lr_keeps_global() {
    let (clients, d, c) = blob_clients(2, 6, default_candidates());
    let g = global(d, c, Mode::Bayesian, 6);
    let net = local_train(&clients[0], &g, 1e-12, &Prior::default()).unwrap();
    for (a, b) in net.to_flat().iter().zip(g.net.to_flat()) {
        assert!((a - b).abs() <= 1e-9);
    }
    assert!(local_train(&clients[0], &g, 0.0, &Prior::default()).is_err());
}

#[test]
fn local_training_improves_meta_loss() {
    let (mut clients, d, c) = blob_clients(2, 7, Candidates::Fixed(vec![0.01, 0.05, 0.2]));
    clients[0].config.local_epochs = 3;
    let g = global(d, c, Mode::Bayesian, 7);
    let prior = Prior::default();
    let sel = meta_select_lr(&clients[0], &g, &prior, Exec::Sequential).unwrap();
    let net = local_train(&clients[0], &g, sel.best_lr, &prior).unwrap();
    let meta = &clients[0].shards.meta;
    let eval = |n: &VariationalNet| {
        score(n, &meta.rows(), meta.labels(), 10, &mut derive_rng(&SeedPath::new(99)))
            .unwrap()
            .1
    };
    assert!(eval(&net) <= eval(&g.net), "{} vs {}", eval(&net), eval(&g.net));
}

#[test]
fn divergence_reports_client_and_epoch() {
    let (clients, d, c) = blob_clients(2, 8, default_candidates());
    let g = global(d, c, Mode::Deterministic, 8);
    let err = local_train(&clients[1], &g, 1e300, &Prior::default()).unwrap_err();
    match err {
        Error::Divergence { context } => assert!(context.contains("client 1, round 1, epoch 1"), "{context}"),
        other => panic!("{other}"),
    }
}

#[test]
fn single_client_fedavg_round_equals_local_training() {
    let (clients, d, c) = blob_clients(1, 9, default_candidates());
    let g = global(d, c, Mode::Deterministic, 9);
    let (next, report) = run_round(
        &g,
        &clients,
        &Prior::default(),
        Protocol::FedAvgDet(0.05),
        RoundOptions::default(),
    )
    .unwrap();
    let local = local_train(&clients[0], &g, 0.05, &Prior::default()).unwrap();
    assert_eq!(next.net, local);
    assert_eq!(next.round, 1);
    assert_eq!(report.clients.len(), 1);
    assert!(report.clients[0].meta_losses.is_empty());
}

#[test]
fn rounds_are_deterministic_across_schedules() {
    let (clients, d, c) = blob_clients(5, 10, default_candidates());
    let prior = Prior::default();
    let run = |exec: Exec| {
        let mut g = global(d, c, Mode::Bayesian, 10);
        let mut reports = Vec::new();
        for _ in 0..2 {
            let (next, rep) = run_round(
                &g,
                &clients,
                &prior,
                Protocol::MetaBayFl,
                RoundOptions {
                    exec,
                    ..Default::default()
                },
            )
            .unwrap();
            g = next;
            reports.push(rep);
        }
        (g, reports)
    };
    let (g1, r1) = run(Exec::Parallel);
    let (g2, r2) = run(Exec::Parallel);
    let (g3, r3) = run(Exec::Sequential);
    assert_eq!(r1, r2);
    assert_eq!(r1, r3);
    let bits = |g: &GlobalModel| g.net.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&g1), bits(&g2));
    assert_eq!(bits(&g1), bits(&g3));
    assert_eq!(r1[1].round, 2);
    assert!(r1[0].clients.iter().all(|c| c.meta_losses.len() == 3));
}

#[test]
fn protocol_forces_net_mode() {
    let (clients, d, c) = blob_clients(2, 11, default_candidates());
    let g = global(d, c, Mode::Bayesian, 11);
    let (next, _) = run_round(
        &g,
        &clients,
        &Prior::default(),
        Protocol::FedAvgDet(0.01),
        RoundOptions::default(),
    )
    .unwrap();
    assert_eq!(next.net.mode(), Mode::Deterministic);
    assert!(run_round(&g, &[], &Prior::default(), Protocol::MetaBayFl, RoundOptions::default()).is_err());
}

#[test]
fn protocol_names_parse() {
    for p in [
        Protocol::MetaBayFl,
        Protocol::BayFlFixed(0.01),
        Protocol::FedAvgDet(0.001),
    ] {
        assert_eq!(p.to_string().parse::<Protocol>().unwrap(), p);
    }
    assert!("bayfl_fixed".parse::<Protocol>().is_err());
    assert!("fedavg_det(-1)".parse::<Protocol>().is_err());
    assert!("sgd(0.1)".parse::<Protocol>().is_err());
}

#[test]
fn schedule_candidates_dedupe() {
    let c = Candidates::Schedule { a: 1.0, horizon: 4 };
    assert_eq!(c.at(1).unwrap(), vec![0.5, 1.0]);
    assert_eq!(c.at(4).unwrap(), vec![0.5, 0.25]);
    assert_eq!(c.at(2).unwrap(), vec![0.5, 1.0 / 2f64.sqrt()]);
    assert!(c.at(5).is_err());
}

#[test]
fn client_state_validation() {
    let (clients, _, _) = blob_clients(2, 12, default_candidates());
    let shards = clients[0].shards.clone();
    let mk = |cands: Vec<f64>, cfg: LocalConfig| {
        ClientState::new(0, shards.clone(), Candidates::Fixed(cands), cfg, SeedPath::new(0))
    };
    assert!(mk(vec![], LocalConfig::default()).is_err());
    assert!(mk(vec![0.1, 0.1], LocalConfig::default()).is_err());
    assert!(mk(vec![-0.1], LocalConfig::default()).is_err());
    let zero_t = LocalConfig {
        local_epochs: 0,
        ..Default::default()
    };
    assert!(mk(vec![0.1], zero_t).is_err());
    let overlap = LocalConfig {
        meta_overlap: true,
        ..Default::default()
    };
    let c = mk(vec![0.1], overlap).unwrap();
    assert_eq!(c.training_set().len(), shards.train.len() + shards.meta.len());
}

#[test]
fn kl_scale_policies() {
    assert_eq!(KlScale::PerSample.value(200, 32), 1.0 / 200.0);
    assert_eq!(KlScale::PerBatch.value(200, 32), 1.0 / 7.0);
    assert_eq!(KlScale::Fixed(0.5).value(200, 32), 0.5);
}

#[test]
fn checkpoint_round_trip() {
    let mut g = global(3, 2, Mode::Bayesian, 13);
    g.round = 17;
    let bytes = g.checkpoint();
    assert_eq!(GlobalModel::restore(&bytes).unwrap(), g);
    assert!(GlobalModel::restore(&bytes[..20]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(GlobalModel::restore(&bad).is_err());
}

/// Two-class logistic regression on one feature: a convex problem whose
/// temporary training is replayed below without the crate's training code.
fn convex_client(candidates: Vec<f64>, seed: u64) -> (ClientState, GlobalModel) {
    let mut rng = derive_rng(&SeedPath::new(seed).child(500));
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..60 {
        let y = i % 2;
        xs.push(if y == 1 { 0.65 } else { 0.35 } + 0.2 * rng.normal());
        ys.push(y);
    }
    let ds = Dataset::new("line", 1, xs, ys, 2).unwrap();
    let shards = make_shards(&ds, seed).unwrap();
    let config = LocalConfig {
        t_temp: 2,
        batch_size: 8,
        ..Default::default()
    };
    let client = ClientState::new(0, shards, Candidates::Fixed(candidates), config, SeedPath::new(seed)).unwrap();
    let layer = VariationalLayer::zeros(1, 2);
    let net = VariationalNet::from_layers(vec![layer], Mode::Deterministic).unwrap();
    (client, GlobalModel::new(net))
}

fn brute_force_losses(client: &ClientState, global: &GlobalModel) -> Vec<f64> {
    let train = client.training_set();
    let meta = client.selection_set();
    let path = client.seed.client_round(global.round + 1, 0, Purpose::TempTrain);
    let nll = |w: &[f64; 4], x: f64, y: usize| {
        let z = [w[0] * x + w[2], w[1] * x + w[3]];
        let m = z[0].max(z[1]);
        let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
        (lse - z[y], [(z[0] - lse).exp(), (z[1] - lse).exp()])
    };
    client
        .lr_candidates
        .at(1)
        .unwrap()
        .iter()
        .map(|&lr| {
            // w = [W00, W10, b0, b1]
            let mut w = [0.0f64; 4];
            let mut order_rng = derive_rng(&path.child(0));
            let mut order: Vec<usize> = (0..train.len()).collect();
            for _ in 0..client.config.t_temp {
                order_rng.shuffle(&mut order);
                for chunk in order.chunks(client.config.batch_size) {
                    let mut g = [0.0; 4];
                    for &i in chunk {
                        let (x, y) = (train.row(i)[0], train.label(i));
                        let (_, p) = nll(&w, x, y);
                        for c in 0..2 {
                            let d = p[c] - if c == y { 1.0 } else { 0.0 };
                            g[c] += d * x;
                            g[2 + c] += d;
                        }
                    }
                    for j in 0..4 {
                        w[j] -= lr * g[j] / chunk.len() as f64;
                    }
                }
            }
            (0..meta.len())
                .map(|i| nll(&w, meta.row(i)[0], meta.label(i)).0)
                .sum::<f64>()
                / meta.len() as f64
        })
        .collect()
}

#[test]
fn selection_matches_brute_force_replay() {
    for (seed, cands) in [
        (1u64, vec![0.01, 0.3, 3.0]),
        (2, vec![5.0, 0.5, 0.05]),
        (3, vec![0.2, 1.0, 8.0]),
    ] {
        let (client, g) = convex_client(cands, seed);
        let sel = meta_select_lr(&client, &g, &Prior::default(), Exec::Sequential).unwrap();
        let oracle = brute_force_losses(&client, &g);
        for (a, b) in sel.losses.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let argmin = (0..3).min_by(|&a, &b| oracle[a].total_cmp(&oracle[b])).unwrap();
        assert_eq!(sel.best_index, argmin);
    }
}
