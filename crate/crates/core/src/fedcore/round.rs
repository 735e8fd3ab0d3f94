use std::fmt;
use std::str::FromStr;

use super::aggregate::{aggregate, Weighting};
use super::state::{ClientState, GlobalModel};
use super::train::{meta_select_lr, train_local};
use crate::bnn::{score, Mode, Prior};
use crate::exec::Exec;
use crate::numkernel::{derive_rng, Purpose};
use crate::{Error, Result};

/// Which client procedure a round runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Protocol {
    /// Per-round meta selection of the lr, then Bayesian local training.
    MetaBayFl,
    /// Bayesian local training at a fixed lr.
    BayFlFixed(f64),
    /// Deterministic net, plain cross-entropy, fixed lr.
    FedAvgDet(f64),
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::MetaBayFl => "meta_bayfl",
            Protocol::BayFlFixed(_) => "bayfl_fixed",
            Protocol::FedAvgDet(_) => "fedavg_det",
        }
    }

    pub fn net_mode(&self) -> Mode {
        match self {
            Protocol::FedAvgDet(_) => Mode::Deterministic,
            _ => Mode::Bayesian,
        }
    }

    pub fn fixed_lr(&self) -> Option<f64> {
        match *self {
            Protocol::MetaBayFl => None,
            Protocol::BayFlFixed(lr) | Protocol::FedAvgDet(lr) => Some(lr),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.fixed_lr() {
            Some(lr) => write!(f, "{}({lr:?})", self.name()),
            None => f.write_str(self.name()),
        }
    }
}

/// Parses `meta_bayfl`, `bayfl_fixed(0.01)` or `fedavg_det(0.01)`.
impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "meta_bayfl" {
            return Ok(Protocol::MetaBayFl);
        }
        let bad = || Error::Argument(format!("unknown mode {s:?}"));
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let lr: f64 = rest
            .strip_suffix(')')
            .ok_or_else(bad)?
            .trim()
            .parse()
            .map_err(|_| bad())?;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Argument(format!("mode {s:?}: learning rate must be > 0")));
        }
        match name.trim() {
            "bayfl_fixed" => Ok(Protocol::BayFlFixed(lr)),
            "fedavg_det" => Ok(Protocol::FedAvgDet(lr)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub id: usize,
    pub selected_lr: f64,
    /// Meta loss per candidate (empty for fixed-lr protocols).
    pub meta_losses: Vec<f64>,
    /// Mean minibatch loss over the final local epoch.
    pub train_loss: f64,
    /// Local model scored on the client's own test shard.
    pub test_accuracy: f64,
    pub test_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// 1-based index of the round just completed.
    pub round: u64,
    pub clients: Vec<ClientReport>,
    /// Aggregated net on the global test set, when the caller scores it.
    pub global: Option<(f64, f64)>,
}

/// Options that apply to the whole round.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RoundOptions {
    pub weighting: Weighting,
    pub exec: Exec,
}

/// Broadcast, run every client's procedure, then aggregate in client order.
/// Any client failure aborts the round before aggregation.
pub fn run_round(
    global: &GlobalModel,
    clients: &[ClientState],
    prior: &Prior,
    protocol: Protocol,
    options: RoundOptions,
) -> Result<(GlobalModel, RoundReport)> {
    if clients.is_empty() {
        return Err(Error::Argument("a round needs at least one client".into()));
    }
    let broadcast = GlobalModel {
        net: global.net.clone().with_mode(protocol.net_mode()),
        round: global.round,
    };
    let k = global.round + 1;
    let outcomes = options.exec.try_map(clients, |_, client| {
        client_procedure(client, &broadcast, prior, protocol, options.exec)
    })?;
    let (nets, reports): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let sizes: Vec<usize> = clients.iter().map(|c| c.training_set().len()).collect();
    let net = aggregate(&nets, options.weighting, &sizes)?;
    Ok((
        GlobalModel { net, round: k },
        RoundReport {
            round: k,
            clients: reports,
            global: None,
        },
    ))
}

fn client_procedure(
    client: &ClientState,
    global: &GlobalModel,
    prior: &Prior,
    protocol: Protocol,
    exec: Exec,
) -> Result<(crate::bnn::VariationalNet, ClientReport)> {
    let (lr, meta_losses) = match protocol.fixed_lr() {
        Some(lr) => (lr, Vec::new()),
        None => {
            let sel = meta_select_lr(client, global, prior, exec)?;
            (sel.best_lr, sel.losses)
        }
    };
    let (net, train_loss) = train_local(client, global, lr, prior)?;
    let test = &client.shards.test;
    let mut rng = derive_rng(
        &client
            .seed
            .client_round(global.round + 1, client.id as u64, Purpose::Eval),
    );
    let (test_accuracy, test_loss) = score(&net, &test.rows(), test.labels(), client.config.n_mc_eval, &mut rng)?;
    Ok((
        net,
        ClientReport {
            id: client.id,
            selected_lr: lr,
            meta_losses,
            train_loss,
            test_accuracy,
            test_loss,
        },
    ))
}
