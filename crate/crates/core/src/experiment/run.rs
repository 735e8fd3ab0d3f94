use std::fmt::Write as _;
use std::path::Path;

use super::config::{DataSource, ExperimentConfig, PartitionSpec};
use super::metrics::{emit_csv, emit_plotdata, MetricsRow, Scope};
use crate::bnn::{score, Mode, Prior, VariationalNet};
use crate::datahub::{
    inject_noise, load_csv, load_idx, make_shards, partition_dirichlet_min, partition_step_with, subsample,
    synth_blobs, Dataset, Partition,
};
use crate::exec::Exec;
use crate::fedcore::{run_round, ClientState, GlobalModel, LocalConfig, Protocol, RoundOptions, RoundReport};
use crate::numkernel::{derive_rng, derive_seed, Purpose, RngStream, SeedPath};
use crate::{Error, Result};

/// Accuracy and mean predictive cross-entropy of `net` on `ds`.
pub fn evaluate(net: &VariationalNet, ds: &Dataset, n_mc: usize, rng: &mut RngStream) -> Result<(f64, f64)> {
    score(net, &ds.rows(), ds.labels(), n_mc, rng)
}

/// Load, subsample, corrupt and partition the configured dataset.
pub fn build_partition(cfg: &ExperimentConfig) -> Result<(Dataset, Partition)> {
    let root = SeedPath::new(cfg.seed);
    let seed_for = |p: Purpose| derive_seed(&root.purpose(p));
    let raw = match &cfg.data {
        DataSource::Synth {
            classes,
            dim,
            per_class,
            spread,
        } => synth_blobs(*classes, *dim, *per_class, *spread, seed_for(Purpose::Synth))?,
        DataSource::Idx { images, labels } => load_idx(images, labels)?,
        DataSource::Csv { path, classes } => load_csv(path, *classes)?,
    };
    let reduced = subsample(&raw, cfg.fraction, seed_for(Purpose::Subsample))?;
    let dataset = inject_noise(&reduced, cfg.noise_epsilon, cfg.noise_mode, seed_for(Purpose::Noise))?;
    let partition = match cfg.partition {
        PartitionSpec::Dirichlet { alpha, min_size } => {
            partition_dirichlet_min(&dataset, cfg.clients, alpha, min_size, seed_for(Purpose::Partition))?
        }
        PartitionSpec::Step {
            n_major,
            major_per,
            minor_per,
            replacement,
        } => partition_step_with(
            &dataset,
            cfg.clients,
            n_major,
            major_per,
            minor_per,
            replacement,
            seed_for(Purpose::Partition),
        )?,
    };
    Ok((dataset, partition))
}

/// Data artifacts shared by every mode of one experiment.
#[derive(Debug, Clone)]
pub struct Population {
    pub dataset: Dataset,
    pub partition: Partition,
    pub clients: Vec<ClientState>,
    /// Union of the clients' test shards.
    pub global_test: Dataset,
}

impl Population {
    /// Build from the config. Every seed derives from the master seed alone,
    /// so all modes see the same data.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let root = SeedPath::new(cfg.seed);
        let (dataset, partition) = build_partition(cfg)?;
        let shards = (0..cfg.clients)
            .map(|n| {
                let shard_seed = derive_seed(&root.purpose(Purpose::Shards).child(n as u64));
                make_shards(&partition.client_dataset(&dataset, n), shard_seed).map_err(|e| match e {
                    Error::Shard { len, msg } => Error::Shard {
                        len,
                        msg: format!("client {n}: {msg}"),
                    },
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let federation_train: usize = shards
            .iter()
            .map(|s| s.train.len() + if cfg.meta_overlap { s.meta.len() } else { 0 })
            .sum();
        let local = LocalConfig {
            local_epochs: cfg.local_epochs,
            t_temp: cfg.t_temp,
            batch_size: cfg.batch_size,
            n_mc_train: cfg.n_mc_train,
            n_mc_eval: cfg.n_mc_eval,
            kl_scale: cfg.kl_scale.resolve(federation_train),
            meta_overlap: cfg.meta_overlap,
            select_on_test: cfg.select_on_test,
        };
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(n, s)| ClientState::new(n, s, cfg.candidates.clone(), local.clone(), root.clone()))
            .collect::<Result<Vec<_>>>()?;
        let tests: Vec<&Dataset> = clients.iter().map(|c| &c.shards.test).collect();
        let global_test = Dataset::concat("global-test", &tests)?;
        Ok(Self {
            dataset,
            partition,
            clients,
            global_test,
        })
    }

    /// Freshly initialized global model (same μ for every mode).
    pub fn initial_model(&self, cfg: &ExperimentConfig) -> Result<GlobalModel> {
        let mut sizes = vec![self.dataset.dim()];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(self.dataset.n_classes());
        let mut rng = derive_rng(&SeedPath::new(cfg.seed).purpose(Purpose::Init));
        Ok(GlobalModel::new(VariationalNet::init(
            &sizes,
            Mode::Bayesian,
            cfg.init_sigma,
            &mut rng,
        )?))
    }
}

/// One mode's complete (or partial, on failure) trajectory.
#[derive(Debug, Clone)]
pub struct ModeOutcome {
    pub label: String,
    pub protocol: Protocol,
    pub rows: Vec<MetricsRow>,
    pub reports: Vec<RoundReport>,
    pub final_model: Option<GlobalModel>,
    pub manifest: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub modes: Vec<ModeOutcome>,
}

impl ExperimentOutcome {
    pub fn rows(&self) -> Vec<MetricsRow> {
        self.modes.iter().flat_map(|m| m.rows.iter().cloned()).collect()
    }

    pub fn mode(&self, label: &str) -> Option<&ModeOutcome> {
        self.modes.iter().find(|m| m.label == label)
    }
}

fn client_rows(run: &str, mode: &str, report: &RoundReport) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for c in &report.clients {
        let scope = Scope::Client(c.id);
        let mut push = |metric: String, value: f64| {
            if value.is_finite() {
                rows.push(MetricsRow {
                    run: run.to_string(),
                    mode: mode.to_string(),
                    round: report.round,
                    scope,
                    metric,
                    value,
                });
            }
        };
        push("test_accuracy".into(), c.test_accuracy);
        push("test_loss".into(), c.test_loss);
        push("selected_lr".into(), c.selected_lr);
        push("train_loss".into(), c.train_loss);
        for (i, &l) in c.meta_losses.iter().enumerate() {
            push(format!("meta_loss_{i}"), l);
        }
    }
    rows
}

fn participants(cfg: &ExperimentConfig, clients: &[ClientState], k: u64) -> Vec<ClientState> {
    if cfg.participation >= 1.0 {
        return clients.to_vec();
    }
    let m = ((cfg.participation * clients.len() as f64).ceil() as usize).clamp(1, clients.len());
    let mut ids: Vec<usize> = (0..clients.len()).collect();
    derive_rng(&SeedPath::new(cfg.seed).child(k).purpose(Purpose::ClientSampling)).shuffle(&mut ids);
    let mut chosen = ids[..m].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| clients[i].clone()).collect()
}

/// Run all `K` rounds of one protocol.
pub fn run_mode(cfg: &ExperimentConfig, protocol: Protocol, exec: Exec) -> Result<ModeOutcome> {
    let label = cfg.mode_label(&protocol);
    let pop = Population::build(cfg)?;
    let prior = Prior::new(cfg.prior_mu0, cfg.prior_sigma0)?;
    let mut global = pop.initial_model(cfg)?;
    let test_rows = pop.global_test.rows();
    let options = RoundOptions {
        weighting: cfg.weighting,
        exec,
    };
    let mut out = ModeOutcome {
        label: label.clone(),
        protocol,
        rows: Vec::new(),
        reports: Vec::new(),
        final_model: None,
        manifest: pop.partition.manifest(),
        error: None,
    };
    for k in 1..=cfg.rounds {
        let round_clients;
        let clients = if cfg.participation >= 1.0 {
            &pop.clients
        } else {
            round_clients = participants(cfg, &pop.clients, k);
            &round_clients
        };
        let (next, mut report) = match run_round(&global, clients, &prior, protocol, options) {
            Ok(r) => r,
            Err(Error::Divergence { context }) => {
                out.error = Some(format!("divergence in mode {label}, {context}"));
                return Ok(out);
            }
            Err(e) => return Err(e),
        };
        global = next;
        let mut rng = derive_rng(&SeedPath::new(cfg.seed).client_round(k, u64::MAX, Purpose::Eval));
        let (acc, loss) = score(
            &global.net,
            &test_rows,
            pop.global_test.labels(),
            cfg.n_mc_eval,
            &mut rng,
        )?;
        report.global = Some((acc, loss));
        for (metric, value) in [("test_accuracy", acc), ("test_loss", loss)] {
            if value.is_finite() {
                out.rows.push(MetricsRow {
                    run: cfg.run_id.clone(),
                    mode: label.clone(),
                    round: k,
                    scope: Scope::Global,
                    metric: metric.into(),
                    value,
                });
            }
        }
        out.rows.extend(client_rows(&cfg.run_id, &label, &report));
        out.reports.push(report);
    }
    out.final_model = Some(global);
    Ok(out)
}

pub const INCOMPLETE_FILE: &str = "INCOMPLETE";

/// Run every configured mode and, if `cfg.out` is set, write `metrics.csv`,
/// `config.snapshot`, `partition.manifest` and `plot/*.dat` there. A
/// diverged mode keeps its partial rows, an `INCOMPLETE` file is written,
/// and the first divergence (in mode order) is returned as the error.
pub fn run_experiment_with(cfg: &ExperimentConfig, exec: Exec) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let modes = exec.try_map(&cfg.modes, |_, &p| run_mode(cfg, p, exec))?;
    let outcome = ExperimentOutcome { modes };
    if let Some(dir) = &cfg.out {
        write_outputs(cfg, &outcome, dir)?;
    }
    if let Some(msg) = outcome.modes.iter().find_map(|m| m.error.clone()) {
        return Err(Error::Divergence { context: msg });
    }
    Ok(outcome)
}

/// [`run_experiment_with`] on the default parallel schedule, returning rows.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    Ok(run_experiment_with(cfg, Exec::default())?.rows())
}

fn write_outputs(cfg: &ExperimentConfig, outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows = outcome.rows();
    emit_csv(&rows, dir.join("metrics.csv"))?;
    let snapshot = dir.join("config.snapshot");
    std::fs::write(&snapshot, cfg.to_text()).map_err(|e| Error::io(&snapshot, e))?;
    if let Some(first) = outcome.modes.first() {
        let manifest = dir.join("partition.manifest");
        std::fs::write(&manifest, &first.manifest).map_err(|e| Error::io(&manifest, e))?;
    }
    emit_plotdata(&rows, dir.join("plot"))?;
    let sentinel = dir.join(INCOMPLETE_FILE);
    let errors: Vec<&str> = outcome.modes.iter().filter_map(|m| m.error.as_deref()).collect();
    if errors.is_empty() {
        if sentinel.exists() {
            std::fs::remove_file(&sentinel).map_err(|e| Error::io(&sentinel, e))?;
        }
    } else {
        std::fs::write(&sentinel, errors.join("\n") + "\n").map_err(|e| Error::io(&sentinel, e))?;
    }
    Ok(())
}

/// Last-round global value of `metric` for `mode`.
pub fn final_metric(rows: &[MetricsRow], mode: &str, metric: &str) -> Option<f64> {
    rows.iter()
        .filter(|r| r.mode == mode && r.scope == Scope::Global && r.metric == metric)
        .max_by_key(|r| r.round)
        .map(|r| r.value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub fraction: f64,
    pub epsilon: f64,
    /// Final global accuracy per mode, in [`SweepTable::modes`] order.
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub modes: Vec<String>,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    /// One row per cell, one column per mode.
    pub fn to_csv(&self) -> String {
        let mut s = format!("fraction,epsilon,{}\n", self.modes.join(","));
        for c in &self.cells {
            let accs: Vec<String> = c.accuracy.iter().map(|a| format!("{a:.16e}")).collect();
            writeln!(s, "{:?},{:?},{}", c.fraction, c.epsilon, accs.join(",")).expect("write to String");
        }
        s
    }
}

/// Data-fraction × noise grid. Cells reuse the master seed so every cell
/// sees the same base data, partition draw and client streams.
pub fn sweep(cfg: &ExperimentConfig, fractions: &[f64], epsilons: &[f64], exec: Exec) -> Result<SweepTable> {
    if fractions.is_empty() || epsilons.is_empty() {
        return Err(Error::Argument("sweep grid is empty".into()));
    }
    let grid: Vec<(f64, f64)> = fractions
        .iter()
        .flat_map(|&f| epsilons.iter().map(move |&e| (f, e)))
        .collect();
    let modes: Vec<String> = cfg.modes.iter().map(|m| cfg.mode_label(m)).collect();
    let cells = exec.try_map(&grid, |_, &(fraction, epsilon)| {
        let mut cell = cfg.clone();
        cell.fraction = fraction;
        cell.noise_epsilon = epsilon;
        cell.out = None;
        let rows = run_experiment_with(&cell, exec)?.rows();
        let accuracy = modes
            .iter()
            .map(|m| final_metric(&rows, m, "test_accuracy").unwrap_or(f64::NAN))
            .collect();
        Ok::<_, Error>(SweepCell {
            fraction,
            epsilon,
            accuracy,
        })
    })?;
    let table = SweepTable { modes, cells };
    if let Some(dir) = &cfg.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("sweep.csv");
        std::fs::write(&path, table.to_csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(table)
}
