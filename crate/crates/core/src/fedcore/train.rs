use super::state::{ClientState, GlobalModel};
use crate::bnn::{elbo_backward, score, sgd_step, Prior, VariationalNet};
use crate::datahub::Dataset;
use crate::exec::Exec;
use crate::numkernel::{derive_rng, Purpose, RngStream};
use crate::{Error, Result};

/// Knobs for one run of minibatch descent on the negative ELBO.
#[derive(Debug, Clone, Copy)]
pub struct SgdPlan<'a> {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub n_mc: usize,
    pub kl_scale: f64,
    pub prior: &'a Prior,
}

/// Training stopped on a non-finite loss or gradient in this (1-based) epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Diverged {
    pub epoch: usize,
}

/// Run `plan.epochs` shuffled passes over `ds`, calling `on_epoch` after each
/// with the epoch number, the current net and the epoch's mean batch loss.
/// Returns the final epoch's mean batch loss.
pub fn train_epochs(
    net: &mut VariationalNet,
    ds: &Dataset,
    plan: SgdPlan<'_>,
    order_rng: &mut RngStream,
    noise_rng: &mut RngStream,
    mut on_epoch: impl FnMut(usize, &VariationalNet, f64),
) -> Result<std::result::Result<f64, Diverged>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut last = f64::NAN;
    for epoch in 1..=plan.epochs {
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(plan.batch_size) {
            let batch = ds.batch(chunk)?;
            let (bd, grads) = elbo_backward(net, &batch, plan.prior, plan.n_mc, plan.kl_scale, noise_rng)?;
            if !bd.loss.is_finite() || !grads.is_finite() {
                return Ok(Err(Diverged { epoch }));
            }
            sgd_step(net, &grads, plan.lr)?;
            total += bd.loss;
            batches += 1;
        }
        if !net.is_finite() {
            return Ok(Err(Diverged { epoch }));
        }
        last = total / batches as f64;
        on_epoch(epoch, net, last);
    }
    Ok(Ok(last))
}

/// Streams for client `id` in round `k`.
fn stream(client: &ClientState, k: u64, purpose: Purpose) -> RngStream {
    derive_rng(&client.seed.client_round(k, client.id as u64, purpose))
}

/// Final local training from a clone of the global net; also returns the
/// mean batch loss of the last epoch.
pub fn train_local(
    client: &ClientState,
    global: &GlobalModel,
    lr: f64,
    prior: &Prior,
) -> Result<(VariationalNet, f64)> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Argument(format!("learning rate must be > 0, got {lr}")));
    }
    let k = global.round + 1;
    let mut net = global.net.clone();
    let plan = SgdPlan {
        lr,
        epochs: client.config.local_epochs,
        batch_size: client.config.batch_size,
        n_mc: client.config.n_mc_train,
        kl_scale: client.kl_scale(),
        prior,
    };
    let mut order = stream(client, k, Purpose::BatchOrder);
    let mut noise = stream(client, k, Purpose::LocalTrain);
    match train_epochs(
        &mut net,
        client.training_set(),
        plan,
        &mut order,
        &mut noise,
        |_, _, _| {},
    )? {
        Ok(loss) => Ok((net, loss)),
        Err(Diverged { epoch }) => Err(Error::Divergence {
            context: format!("client {}, round {k}, epoch {epoch}", client.id),
        }),
    }
}

/// `T` local epochs at learning rate `lr`, starting from the global net.
pub fn local_train(client: &ClientState, global: &GlobalModel, lr: f64, prior: &Prior) -> Result<VariationalNet> {
    Ok(train_local(client, global, lr, prior)?.0)
}

/// Meta losses per candidate and the winning learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSelection {
    pub candidates: Vec<f64>,
    /// Meta loss after temporary training; `+inf` marks a diverged candidate.
    pub losses: Vec<f64>,
    pub best_index: usize,
    pub best_lr: f64,
}

impl LrSelection {
    /// Argmin over `losses` (first index on ties). Non-finite losses count
    /// as `+inf`; if every candidate is non-finite the selection fails.
    pub fn from_losses(candidates: &[f64], losses: &[f64]) -> Result<Self> {
        if candidates.is_empty() || candidates.len() != losses.len() {
            return Err(Error::dim(
                format!("{} candidates", candidates.len()),
                format!("{} losses", losses.len()),
            ));
        }
        let losses: Vec<f64> = losses
            .iter()
            .map(|&l| if l.is_finite() { l } else { f64::INFINITY })
            .collect();
        let mut best_index = 0;
        for (i, &l) in losses.iter().enumerate().skip(1) {
            if l < losses[best_index] {
                best_index = i;
            }
        }
        if candidates.len() > 1 && losses[best_index] == f64::INFINITY {
            return Err(Error::Divergence {
                context: "lr selection: every candidate diverged".into(),
            });
        }
        Ok(Self {
            candidates: candidates.to_vec(),
            losses,
            best_index,
            best_lr: candidates[best_index],
        })
    }
}

/// Temporarily train one clone of the global net per candidate and keep the
/// lr whose clone scores the lowest predictive cross-entropy on the
/// selection shard. Every candidate replays the same batch order, weight
/// noise and evaluation samples, so they differ only in the step size.
pub fn meta_select_lr(client: &ClientState, global: &GlobalModel, prior: &Prior, exec: Exec) -> Result<LrSelection> {
    let k = global.round + 1;
    let candidates = client.lr_candidates.at(k)?;
    if candidates.len() == 1 {
        return LrSelection::from_losses(&candidates, &[temp_loss(client, global, prior, candidates[0], k)?]);
    }
    let losses = exec.try_map(&candidates, |_, &lr| temp_loss(client, global, prior, lr, k))?;
    LrSelection::from_losses(&candidates, &losses).map_err(|e| match e {
        Error::Divergence { context } => Error::Divergence {
            context: format!("client {}, round {k}: {context}", client.id),
        },
        other => other,
    })
}

fn temp_loss(client: &ClientState, global: &GlobalModel, prior: &Prior, lr: f64, k: u64) -> Result<f64> {
    let mut net = global.net.clone();
    let plan = SgdPlan {
        lr,
        epochs: client.config.t_temp,
        batch_size: client.config.batch_size,
        n_mc: client.config.n_mc_train,
        kl_scale: client.kl_scale(),
        prior,
    };
    let temp = client.seed.client_round(k, client.id as u64, Purpose::TempTrain);
    let mut order = derive_rng(&temp.child(0));
    let mut noise = derive_rng(&temp.child(1));
    if train_epochs(
        &mut net,
        client.training_set(),
        plan,
        &mut order,
        &mut noise,
        |_, _, _| {},
    )?
    .is_err()
    {
        return Ok(f64::INFINITY);
    }
    let sel = client.selection_set();
    let mut eval_rng = stream(client, k, Purpose::MetaEval);
    let (_, loss) = score(&net, &sel.rows(), sel.labels(), client.config.n_mc_eval, &mut eval_rng)?;
    Ok(loss)
}
