use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::datahub::NoiseMode;
use crate::fedcore::{Candidates, KlScale, Protocol, Weighting};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth {
        classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Csv {
        path: PathBuf,
        classes: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PartitionSpec {
    Dirichlet {
        alpha: f64,
        min_size: usize,
    },
    Step {
        n_major: usize,
        major_per: usize,
        minor_per: usize,
        replacement: bool,
    },
}

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub data: DataSource,
    pub partition: PartitionSpec,
    pub clients: usize,
    pub rounds: u64,
    pub local_epochs: usize,
    pub t_temp: usize,
    pub batch_size: usize,
    pub candidates: Candidates,
    /// Learning rate for fixed-lr modes listed without an explicit value.
    pub fixed_lr: f64,
    pub hidden: Vec<usize>,
    pub init_sigma: f64,
    pub prior_mu0: f64,
    pub prior_sigma0: f64,
    pub kl_scale: KlScale,
    pub noise_mode: NoiseMode,
    pub noise_epsilon: f64,
    pub fraction: f64,
    pub n_mc_train: usize,
    pub n_mc_eval: usize,
    pub seed: u64,
    pub modes: Vec<Protocol>,
    pub weighting: Weighting,
    /// Share of clients taking part in each round.
    pub participation: f64,
    pub meta_overlap: bool,
    pub select_on_test: bool,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let fixed_lr = 0.01;
        Self {
            run_id: "main".into(),
            data: DataSource::Synth {
                classes: 10,
                dim: 20,
                per_class: 600,
                spread: 0.35,
            },
            partition: PartitionSpec::Dirichlet {
                alpha: 0.1,
                min_size: 10,
            },
            clients: 5,
            rounds: 20,
            local_epochs: 10,
            t_temp: 1,
            batch_size: 16,
            candidates: Candidates::Fixed(vec![0.0001, 0.001, 0.01]),
            fixed_lr,
            hidden: vec![64, 32],
            init_sigma: crate::bnn::INIT_SIGMA,
            prior_mu0: 0.0,
            prior_sigma0: 1.0,
            kl_scale: KlScale::PerFederationSample,
            noise_mode: NoiseMode::FeatureGauss,
            noise_epsilon: 0.0,
            fraction: 1.0,
            n_mc_train: 1,
            n_mc_eval: 10,
            seed: 1,
            modes: vec![
                Protocol::FedAvgDet(fixed_lr),
                Protocol::BayFlFixed(fixed_lr),
                Protocol::MetaBayFl,
            ],
            weighting: Weighting::Uniform,
            participation: 1.0,
            meta_overlap: false,
            select_on_test: false,
            out: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected true or false, got {other:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn lift(key: &str, e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(format!("{key}: {other}")),
    }
}

impl ExperimentConfig {
    /// Display label for a mode; fixed-lr modes at a non-default lr carry it.
    pub fn mode_label(&self, p: &Protocol) -> String {
        match p.fixed_lr() {
            Some(lr) if lr != self.fixed_lr => format!("{}_lr{lr:?}", p.name()),
            _ => p.name().to_string(),
        }
    }

    /// Apply one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "schema" => {
                let s: u32 = parse_num(key, v)?;
                if s != SCHEMA_VERSION {
                    return Err(Error::Config(format!(
                        "unsupported schema {s} (this build reads {SCHEMA_VERSION})"
                    )));
                }
            }
            "run_id" => {
                if v.is_empty() || v.contains(',') || v.contains('\n') {
                    return Err(Error::Config(format!("run_id {v:?} must be non-empty without commas")));
                }
                self.run_id = v.to_string();
            }
            "dataset" => {
                self.data = match v {
                    "synth" => match &self.data {
                        d @ DataSource::Synth { .. } => d.clone(),
                        _ => ExperimentConfig::default().data,
                    },
                    "idx" => DataSource::Idx {
                        images: PathBuf::new(),
                        labels: PathBuf::new(),
                    },
                    "csv" => DataSource::Csv {
                        path: PathBuf::new(),
                        classes: 0,
                    },
                    other => return Err(Error::Config(format!("dataset: unknown source {other:?}"))),
                }
            }
            "synth.classes" | "synth.dim" | "synth.per_class" | "synth.spread" => {
                let DataSource::Synth {
                    classes,
                    dim,
                    per_class,
                    spread,
                } = &mut self.data
                else {
                    return Err(Error::Config(format!("{key} requires dataset=synth")));
                };
                match key {
                    "synth.classes" => *classes = parse_num(key, v)?,
                    "synth.dim" => *dim = parse_num(key, v)?,
                    "synth.per_class" => *per_class = parse_num(key, v)?,
                    _ => *spread = parse_num(key, v)?,
                }
            }
            "idx.images" | "idx.labels" => {
                let DataSource::Idx { images, labels } = &mut self.data else {
                    return Err(Error::Config(format!("{key} requires dataset=idx")));
                };
                if key == "idx.images" {
                    *images = PathBuf::from(v);
                } else {
                    *labels = PathBuf::from(v);
                }
            }
            "csv.path" | "csv.classes" => {
                let DataSource::Csv { path, classes } = &mut self.data else {
                    return Err(Error::Config(format!("{key} requires dataset=csv")));
                };
                if key == "csv.path" {
                    *path = PathBuf::from(v);
                } else {
                    *classes = parse_num(key, v)?;
                }
            }
            "partition" => {
                self.partition = match v {
                    "dirichlet" => match &self.partition {
                        p @ PartitionSpec::Dirichlet { .. } => p.clone(),
                        _ => ExperimentConfig::default().partition,
                    },
                    "step" => match &self.partition {
                        p @ PartitionSpec::Step { .. } => p.clone(),
                        _ => PartitionSpec::Step {
                            n_major: 2,
                            major_per: 100,
                            minor_per: 10,
                            replacement: false,
                        },
                    },
                    other => return Err(Error::Config(format!("partition: unknown scheme {other:?}"))),
                }
            }
            "dirichlet.alpha" | "dirichlet.min_size" => {
                let PartitionSpec::Dirichlet { alpha, min_size } = &mut self.partition else {
                    return Err(Error::Config(format!("{key} requires partition=dirichlet")));
                };
                if key == "dirichlet.alpha" {
                    *alpha = parse_num(key, v)?;
                } else {
                    *min_size = parse_num(key, v)?;
                }
            }
            "step.n_major" | "step.major_per" | "step.minor_per" | "step.replacement" => {
                let PartitionSpec::Step {
                    n_major,
                    major_per,
                    minor_per,
                    replacement,
                } = &mut self.partition
                else {
                    return Err(Error::Config(format!("{key} requires partition=step")));
                };
                match key {
                    "step.n_major" => *n_major = parse_num(key, v)?,
                    "step.major_per" => *major_per = parse_num(key, v)?,
                    "step.minor_per" => *minor_per = parse_num(key, v)?,
                    _ => *replacement = parse_bool(key, v)?,
                }
            }
            "clients" => self.clients = parse_num(key, v)?,
            "rounds" => {
                self.rounds = parse_num(key, v)?;
                if let Candidates::Schedule { horizon, .. } = &mut self.candidates {
                    *horizon = self.rounds;
                }
            }
            "local_epochs" => self.local_epochs = parse_num(key, v)?,
            "t_temp" => self.t_temp = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "candidates" => {
                self.candidates = if v == "schedule" {
                    Candidates::Schedule {
                        a: match self.candidates {
                            Candidates::Schedule { a, .. } => a,
                            _ => 0.1,
                        },
                        horizon: self.rounds,
                    }
                } else {
                    Candidates::Fixed(parse_list(key, v)?)
                }
            }
            "schedule.a" => {
                let a = parse_num(key, v)?;
                self.candidates = Candidates::Schedule {
                    a,
                    horizon: self.rounds,
                };
            }
            "fixed_lr" => {
                let old = self.fixed_lr;
                self.fixed_lr = parse_num(key, v)?;
                for m in &mut self.modes {
                    *m = match *m {
                        Protocol::BayFlFixed(lr) if lr == old => Protocol::BayFlFixed(self.fixed_lr),
                        Protocol::FedAvgDet(lr) if lr == old => Protocol::FedAvgDet(self.fixed_lr),
                        other => other,
                    };
                }
            }
            "hidden" => self.hidden = if v.is_empty() { Vec::new() } else { parse_list(key, v)? },
            "init_sigma" => self.init_sigma = parse_num(key, v)?,
            "prior.mu0" => self.prior_mu0 = parse_num(key, v)?,
            "prior.sigma0" => self.prior_sigma0 = parse_num(key, v)?,
            "kl_scale" => {
                self.kl_scale = match v {
                    "per_sample" => KlScale::PerSample,
                    "per_federation_sample" => KlScale::PerFederationSample,
                    "per_batch" => KlScale::PerBatch,
                    num => KlScale::Fixed(parse_num(key, num)?),
                }
            }
            "noise.mode" => self.noise_mode = v.parse().map_err(|e| lift(key, e))?,
            "noise.epsilon" => self.noise_epsilon = parse_num(key, v)?,
            "fraction" => self.fraction = parse_num(key, v)?,
            "n_mc_train" => self.n_mc_train = parse_num(key, v)?,
            "n_mc_eval" => self.n_mc_eval = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "modes" => {
                self.modes = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| match s {
                        "bayfl_fixed" => Ok(Protocol::BayFlFixed(self.fixed_lr)),
                        "fedavg_det" => Ok(Protocol::FedAvgDet(self.fixed_lr)),
                        other => other.parse().map_err(|e| lift(key, e)),
                    })
                    .collect::<Result<_>>()?
            }
            "weighting" => self.weighting = v.parse().map_err(|e| lift(key, e))?,
            "participation" => self.participation = parse_num(key, v)?,
            "meta_overlap" => self.meta_overlap = parse_bool(key, v)?,
            "select_on_test" => self.select_on_test = parse_bool(key, v)?,
            "out" => self.out = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parse the `key=value` file form; `#` starts a comment line.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut saw_schema = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            let key = key.trim();
            saw_schema |= key == "schema";
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", i + 1)),
                other => other,
            })?;
        }
        if !saw_schema {
            return Err(Error::Config(format!("missing schema={SCHEMA_VERSION}")));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Canonical file form: every key, fixed order, floats in shortest
    /// round-trip notation.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("write to String");
        kv("schema", SCHEMA_VERSION.to_string());
        kv("run_id", self.run_id.clone());
        match &self.data {
            DataSource::Synth {
                classes,
                dim,
                per_class,
                spread,
            } => {
                kv("dataset", "synth".into());
                kv("synth.classes", classes.to_string());
                kv("synth.dim", dim.to_string());
                kv("synth.per_class", per_class.to_string());
                kv("synth.spread", format!("{spread:?}"));
            }
            DataSource::Idx { images, labels } => {
                kv("dataset", "idx".into());
                kv("idx.images", images.display().to_string());
                kv("idx.labels", labels.display().to_string());
            }
            DataSource::Csv { path, classes } => {
                kv("dataset", "csv".into());
                kv("csv.path", path.display().to_string());
                kv("csv.classes", classes.to_string());
            }
        }
        match &self.partition {
            PartitionSpec::Dirichlet { alpha, min_size } => {
                kv("partition", "dirichlet".into());
                kv("dirichlet.alpha", format!("{alpha:?}"));
                kv("dirichlet.min_size", min_size.to_string());
            }
            PartitionSpec::Step {
                n_major,
                major_per,
                minor_per,
                replacement,
            } => {
                kv("partition", "step".into());
                kv("step.n_major", n_major.to_string());
                kv("step.major_per", major_per.to_string());
                kv("step.minor_per", minor_per.to_string());
                kv("step.replacement", replacement.to_string());
            }
        }
        kv("clients", self.clients.to_string());
        kv("rounds", self.rounds.to_string());
        kv("local_epochs", self.local_epochs.to_string());
        kv("t_temp", self.t_temp.to_string());
        kv("batch_size", self.batch_size.to_string());
        match &self.candidates {
            Candidates::Fixed(v) => kv(
                "candidates",
                v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(","),
            ),
            Candidates::Schedule { a, .. } => {
                kv("candidates", "schedule".into());
                kv("schedule.a", format!("{a:?}"));
            }
        }
        kv("fixed_lr", format!("{:?}", self.fixed_lr));
        kv("hidden", join(&self.hidden));
        kv("init_sigma", format!("{:?}", self.init_sigma));
        kv("prior.mu0", format!("{:?}", self.prior_mu0));
        kv("prior.sigma0", format!("{:?}", self.prior_sigma0));
        kv(
            "kl_scale",
            match self.kl_scale {
                KlScale::PerSample => "per_sample".into(),
                KlScale::PerFederationSample => "per_federation_sample".into(),
                KlScale::PerBatch => "per_batch".into(),
                KlScale::Fixed(v) => format!("{v:?}"),
            },
        );
        kv("noise.mode", self.noise_mode.as_str().into());
        kv("noise.epsilon", format!("{:?}", self.noise_epsilon));
        kv("fraction", format!("{:?}", self.fraction));
        kv("n_mc_train", self.n_mc_train.to_string());
        kv("n_mc_eval", self.n_mc_eval.to_string());
        kv("seed", self.seed.to_string());
        kv(
            "modes",
            self.modes
                .iter()
                .map(|m| match m.fixed_lr() {
                    Some(lr) => format!("{}({lr:?})", m.name()),
                    None => m.name().to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("weighting", self.weighting.as_str().into());
        kv("participation", format!("{:?}", self.participation));
        kv("meta_overlap", self.meta_overlap.to_string());
        kv("select_on_test", self.select_on_test.to_string());
        kv(
            "out",
            self.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        s
    }

    /// Range checks on every numeric field.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        match &self.data {
            DataSource::Synth {
                classes,
                dim,
                per_class,
                spread,
            } => {
                if *classes < 2 || *dim == 0 || *per_class == 0 || !(*spread > 0.0 && spread.is_finite()) {
                    return fail("synth needs classes >= 2, dim >= 1, per_class >= 1, spread > 0".into());
                }
            }
            DataSource::Idx { images, labels } => {
                if images.as_os_str().is_empty() || labels.as_os_str().is_empty() {
                    return fail("dataset=idx needs idx.images and idx.labels".into());
                }
            }
            DataSource::Csv { path, classes } => {
                if path.as_os_str().is_empty() || *classes < 2 {
                    return fail("dataset=csv needs csv.path and csv.classes >= 2".into());
                }
            }
        }
        match &self.partition {
            PartitionSpec::Dirichlet { alpha, .. } => {
                if !(*alpha > 0.0 && alpha.is_finite()) {
                    return fail(format!("dirichlet.alpha must be > 0, got {alpha}"));
                }
                if self.clients < 2 {
                    return fail("the dirichlet scheme needs clients >= 2".into());
                }
            }
            PartitionSpec::Step {
                major_per, minor_per, ..
            } => {
                if major_per + minor_per == 0 {
                    return fail("step.major_per and step.minor_per cannot both be 0".into());
                }
            }
        }
        if self.clients == 0 || self.rounds == 0 {
            return fail("clients and rounds must be >= 1".into());
        }
        for (name, v) in [
            ("local_epochs", self.local_epochs),
            ("t_temp", self.t_temp),
            ("batch_size", self.batch_size),
            ("n_mc_train", self.n_mc_train),
            ("n_mc_eval", self.n_mc_eval),
        ] {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        match &self.candidates {
            Candidates::Fixed(v) => {
                if v.is_empty() || v.iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
                    return fail("candidates must be a non-empty list of positive learning rates".into());
                }
                if (1..v.len()).any(|i| v[..i].contains(&v[i])) {
                    return fail("candidates must not repeat".into());
                }
            }
            Candidates::Schedule { a, .. } => {
                if !(*a > 0.0 && a.is_finite()) {
                    return fail(format!("schedule.a must be > 0, got {a}"));
                }
            }
        }
        if !(self.fixed_lr > 0.0 && self.fixed_lr.is_finite()) {
            return fail(format!("fixed_lr must be > 0, got {}", self.fixed_lr));
        }
        if self.hidden.contains(&0) {
            return fail("hidden layer widths must be >= 1".into());
        }
        if !(self.init_sigma > 0.0 && self.init_sigma.is_finite())
            || !(self.prior_sigma0 > 0.0 && self.prior_sigma0.is_finite())
        {
            return fail("init_sigma and prior.sigma0 must be > 0".into());
        }
        if !self.prior_mu0.is_finite() {
            return fail("prior.mu0 must be finite".into());
        }
        if let KlScale::Fixed(v) = self.kl_scale {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("kl_scale must be >= 0, got {v}"));
            }
        }
        if !(self.noise_epsilon >= 0.0 && self.noise_epsilon.is_finite()) {
            return fail(format!("noise.epsilon must be >= 0, got {}", self.noise_epsilon));
        }
        if self.noise_mode == NoiseMode::LabelFlip && self.noise_epsilon > 1.0 {
            return fail("label_flip needs noise.epsilon <= 1".into());
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return fail(format!("fraction must be in (0, 1], got {}", self.fraction));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return fail(format!("participation must be in (0, 1], got {}", self.participation));
        }
        if self.modes.is_empty() {
            return fail("modes must list at least one protocol".into());
        }
        let labels: Vec<String> = self.modes.iter().map(|m| self.mode_label(m)).collect();
        if (1..labels.len()).any(|i| labels[..i].contains(&labels[i])) {
            return fail("modes must not repeat".into());
        }
        Ok(())
    }
}
