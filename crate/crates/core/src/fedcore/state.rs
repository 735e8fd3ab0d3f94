use super::schedule::{lr_schedule, ScheduleKind};
use crate::bnn::{io, VariationalNet};
use crate::datahub::{ClientShards, Dataset};
use crate::numkernel::SeedPath;
use crate::{Error, Result};

/// Server-side model: the broadcast net and the number of completed rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub net: VariationalNet,
    pub round: u64,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FBCK";
const CHECKPOINT_VERSION: u8 = 1;

impl GlobalModel {
    pub fn new(net: VariationalNet) -> Self {
        Self { net, round: 0 }
    }

    /// `FBCK | version u8 | round u64 LE | net container`.
    pub fn checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&io::to_bytes(&self.net));
        out
    }

    pub fn restore(buf: &[u8]) -> Result<Self> {
        if buf.len() < 13 || &buf[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "not a checkpoint (expected magic FBCK)".into(),
            });
        }
        if buf[4] != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported checkpoint version {}", buf[4]),
            });
        }
        let round = u64::from_le_bytes(buf[5..13].try_into().expect("8 bytes"));
        let net = io::from_bytes(&buf[13..]).map_err(|e| match e {
            Error::Format { offset, msg } => Error::Format {
                offset: offset + 13,
                msg,
            },
            other => other,
        })?;
        Ok(Self { net, round })
    }
}

/// How the KL term is weighted against the per-batch mean likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KlScale {
    /// `1 / |train shard|`: batch-mean nll plus KL per sample.
    PerSample,
    /// `1 / Σ|train shard|` over the whole federation: the global posterior
    /// pays for the prior once, spread over every client's samples. Turned
    /// into [`KlScale::Fixed`] by [`KlScale::resolve`]; unresolved, the
    /// client counts as the whole federation.
    PerFederationSample,
    /// `1 / batches per epoch`.
    PerBatch,
    Fixed(f64),
}

impl KlScale {
    pub fn value(self, n_train: usize, batch_size: usize) -> f64 {
        match self {
            KlScale::PerSample | KlScale::PerFederationSample => 1.0 / n_train.max(1) as f64,
            KlScale::PerBatch => 1.0 / n_train.div_ceil(batch_size.max(1)).max(1) as f64,
            KlScale::Fixed(v) => v,
        }
    }

    /// Pin federation-wide policies given the total training size.
    pub fn resolve(self, federation_train: usize) -> KlScale {
        match self {
            KlScale::PerFederationSample => KlScale::Fixed(1.0 / federation_train.max(1) as f64),
            other => other,
        }
    }
}

/// The learning rates a client may choose from.
#[derive(Debug, Clone, PartialEq)]
pub enum Candidates {
    Fixed(Vec<f64>),
    /// The three decaying forms `a/√K`, `a/k`, `a/√k` at the current round.
    Schedule {
        a: f64,
        horizon: u64,
    },
}

impl Candidates {
    /// Candidate list for round `k` (1-based), duplicates removed in order.
    pub fn at(&self, k: u64) -> Result<Vec<f64>> {
        let raw = match self {
            Candidates::Fixed(v) => v.clone(),
            Candidates::Schedule { a, horizon } => {
                [ScheduleKind::InvSqrtHorizon, ScheduleKind::InvK, ScheduleKind::InvSqrtK]
                    .iter()
                    .map(|&kind| lr_schedule(kind, *a, k, *horizon))
                    .collect::<Result<_>>()?
            }
        };
        let mut out: Vec<f64> = Vec::with_capacity(raw.len());
        for lr in raw {
            if !out.contains(&lr) {
                out.push(lr);
            }
        }
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        match self {
            Candidates::Fixed(v) => {
                if v.is_empty() {
                    return Err(Error::Argument("lr candidate list is empty".into()));
                }
                if let Some(bad) = v.iter().find(|lr| !(**lr > 0.0 && lr.is_finite())) {
                    return Err(Error::Argument(format!("lr candidate {bad} is not > 0")));
                }
                for (i, a) in v.iter().enumerate() {
                    if v[..i].contains(a) {
                        return Err(Error::Argument(format!("duplicate lr candidate {a}")));
                    }
                }
                Ok(())
            }
            Candidates::Schedule { a, horizon } => {
                if !(*a > 0.0 && a.is_finite()) || *horizon == 0 {
                    return Err(Error::Argument(format!(
                        "schedule needs a > 0 and K >= 1, got a={a}, K={horizon}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Per-client training knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalConfig {
    /// Local epochs `T` of final training.
    pub local_epochs: usize,
    /// Epochs of temporary training per lr candidate.
    pub t_temp: usize,
    pub batch_size: usize,
    pub n_mc_train: usize,
    pub n_mc_eval: usize,
    pub kl_scale: KlScale,
    /// Train on train ∪ meta instead of the meta-disjoint train shard.
    pub meta_overlap: bool,
    /// Score lr candidates on the client test shard instead of the meta shard.
    pub select_on_test: bool,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            local_epochs: 1,
            t_temp: 1,
            batch_size: 32,
            n_mc_train: 1,
            n_mc_eval: 10,
            kl_scale: KlScale::PerSample,
            meta_overlap: false,
            select_on_test: false,
        }
    }
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("local_epochs", self.local_epochs),
            ("t_temp", self.t_temp),
            ("batch_size", self.batch_size),
            ("n_mc_train", self.n_mc_train),
            ("n_mc_eval", self.n_mc_eval),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Argument(format!("{name} must be >= 1")));
        }
        if let KlScale::Fixed(v) = self.kl_scale {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("kl_scale must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// One client: its data shards, lr candidates, knobs and seed lineage.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub shards: ClientShards,
    pub lr_candidates: Candidates,
    pub config: LocalConfig,
    /// Root of every stream this client draws (per round and purpose).
    pub seed: SeedPath,
    training: Dataset,
}

impl ClientState {
    pub fn new(
        id: usize,
        shards: ClientShards,
        lr_candidates: Candidates,
        config: LocalConfig,
        seed: SeedPath,
    ) -> Result<Self> {
        lr_candidates.validate()?;
        config.validate()?;
        let training = if config.meta_overlap {
            shards.train_with_meta()
        } else {
            shards.train.clone()
        };
        Ok(Self {
            id,
            shards,
            lr_candidates,
            config,
            seed,
            training,
        })
    }

    /// Data used for temporary and final local training.
    pub fn training_set(&self) -> &Dataset {
        &self.training
    }

    /// Data used to score lr candidates.
    pub fn selection_set(&self) -> &Dataset {
        if self.config.select_on_test {
            &self.shards.test
        } else {
            &self.shards.meta
        }
    }

    pub fn kl_scale(&self) -> f64 {
        self.config.kl_scale.value(self.training.len(), self.config.batch_size)
    }
}
