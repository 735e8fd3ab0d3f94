use super::{largest_remainder, Dataset};
use crate::numkernel::{derive_rng, Purpose, SeedPath};
use crate::{Error, Result};

pub const TEST_FRACTION: f64 = 0.2;
pub const META_FRACTION: f64 = 0.2;

/// Index-disjoint train / meta / test views of one client's samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShards {
    pub train: Dataset,
    pub meta: Dataset,
    pub test: Dataset,
    /// Positions in the client dataset, ascending, per shard.
    pub train_idx: Vec<usize>,
    pub meta_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl ClientShards {
    /// Training portion with the meta shard folded back in.
    pub fn train_with_meta(&self) -> Dataset {
        Dataset::concat(self.train.name(), &[&self.train, &self.meta]).expect("shards share layout")
    }
}

/// Stratified draw of `fraction` of `pool`, taking the earliest members of
/// each class in pool order. Class totals are allotted by
/// largest remainder so the overall count is `round(fraction * |pool|)` and
/// each class is within one sample of its exact share.
fn carve(labels: &[usize], pool: &[usize], n_classes: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class = vec![Vec::new(); n_classes];
    for &i in pool {
        by_class[labels[i]].push(i);
    }
    let total = (fraction * pool.len() as f64).round() as usize;
    let weights: Vec<f64> = by_class.iter().map(|c| c.len() as f64).collect();
    let counts = largest_remainder(&weights, total);
    let mut taken = Vec::with_capacity(total);
    let mut rest = Vec::with_capacity(pool.len() - total);
    for (members, k) in by_class.iter().zip(counts) {
        taken.extend_from_slice(&members[..k]);
        rest.extend_from_slice(&members[k..]);
    }
    (taken, rest)
}

/// 80/20 train/test split, then 20% of train carved out as the meta shard
/// (64 / 16 / 20 overall), all stratified by class.
pub fn make_shards(client: &Dataset, seed: u64) -> Result<ClientShards> {
    let n = client.len();
    if n < 10 {
        return Err(Error::Shard {
            len: n,
            msg: "at least 10 samples are needed".into(),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    derive_rng(&SeedPath::new(seed).purpose(Purpose::Shards)).shuffle(&mut order);
    let (mut test_idx, rest) = carve(client.labels(), &order, client.n_classes(), TEST_FRACTION);
    let (mut meta_idx, mut train_idx) = carve(client.labels(), &rest, client.n_classes(), META_FRACTION);
    for shard in [&mut train_idx, &mut meta_idx, &mut test_idx] {
        shard.sort_unstable();
    }
    for (name, shard) in [("train", &train_idx), ("meta", &meta_idx), ("test", &test_idx)] {
        if shard.is_empty() {
            return Err(Error::Shard {
                len: n,
                msg: format!("{name} shard would be empty"),
            });
        }
    }
    Ok(ClientShards {
        train: client.select(&train_idx),
        meta: client.select(&meta_idx),
        test: client.select(&test_idx),
        train_idx,
        meta_idx,
        test_idx,
    })
}
