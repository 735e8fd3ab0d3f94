use std::fmt::Write as _;

use super::Dataset;
use crate::numkernel::{derive_rng, Purpose, SeedPath};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Step,
    Dirichlet,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Step => "step",
            Scheme::Dirichlet => "dirichlet",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PartitionParams {
    Step {
        n_major: usize,
        major_per: usize,
        minor_per: usize,
        /// Draws that had to reuse an already-assigned sample.
        replaced: usize,
    },
    Dirichlet {
        alpha: f64,
        min_size: usize,
        /// Samples moved from the largest client to fill small ones.
        repaired: usize,
    },
}

/// Assignment of parent-dataset indices to clients.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    assignments: Vec<Vec<usize>>,
    params: PartitionParams,
}

impl Partition {
    pub fn new(assignments: Vec<Vec<usize>>, params: PartitionParams) -> Self {
        Self { assignments, params }
    }

    pub fn scheme(&self) -> Scheme {
        match self.params {
            PartitionParams::Step { .. } => Scheme::Step,
            PartitionParams::Dirichlet { .. } => Scheme::Dirichlet,
        }
    }

    pub fn params(&self) -> &PartitionParams {
        &self.params
    }

    pub fn n_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    pub fn client(&self, n: usize) -> &[usize] {
        &self.assignments[n]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// True when no index appears twice, across or within clients.
    pub fn is_disjoint(&self) -> bool {
        let mut all: Vec<usize> = self.assignments.concat();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        all.len() == n
    }

    /// Per-client per-class sample counts.
    pub fn histogram(&self, ds: &Dataset) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|idx| {
                let mut h = vec![0; ds.n_classes()];
                for &i in idx {
                    h[ds.label(i)] += 1;
                }
                h
            })
            .collect()
    }

    /// Materialize client `n`'s samples.
    pub fn client_dataset(&self, ds: &Dataset, n: usize) -> Dataset {
        ds.select(&self.assignments[n])
    }

    /// `client_id,sample_index` table, one row per assignment.
    pub fn manifest(&self) -> String {
        let mut out = String::from("client_id,sample_index\n");
        for (n, idx) in self.assignments.iter().enumerate() {
            for i in idx {
                writeln!(out, "{n},{i}").expect("write to String");
            }
        }
        out
    }
}

/// Split `total` in proportion to `weights` by largest remainder. Ties go to
/// the lower index; the result always sums to `total`.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if !(sum > 0.0) {
        let mut out = vec![total / weights.len(); weights.len()];
        for slot in out.iter_mut().take(total % weights.len()) {
            *slot += 1;
        }
        return out;
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Label-skewed split: per class, client shares follow `Dirichlet(alpha)`.
pub fn partition_dirichlet(ds: &Dataset, n_clients: usize, alpha: f64, seed: u64) -> Result<Partition> {
    partition_dirichlet_min(ds, n_clients, alpha, 1, seed)
}

/// [`partition_dirichlet`] with every client topped up to `min_size` samples
/// by moving samples off the currently largest client.
pub fn partition_dirichlet_min(
    ds: &Dataset,
    n_clients: usize,
    alpha: f64,
    min_size: usize,
    seed: u64,
) -> Result<Partition> {
    if n_clients < 2 {
        return Err(Error::Argument(format!("need at least 2 clients, got {n_clients}")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Argument(format!("alpha must be > 0, got {alpha}")));
    }
    let min_size = min_size.max(1);
    if ds.len() < n_clients * min_size {
        return Err(Error::Argument(format!(
            "{} samples cannot give {n_clients} clients {min_size} each",
            ds.len()
        )));
    }
    let root = SeedPath::new(seed).purpose(Purpose::Partition);
    let mut assignments = vec![Vec::new(); n_clients];
    for (c, mut idx) in ds.class_indices().into_iter().enumerate() {
        let mut rng = derive_rng(&root.child(c as u64));
        let q = rng.dirichlet(&vec![alpha; n_clients])?;
        rng.shuffle(&mut idx);
        let counts = largest_remainder(&q, idx.len());
        let mut start = 0;
        for (client, k) in counts.into_iter().enumerate() {
            assignments[client].extend_from_slice(&idx[start..start + k]);
            start += k;
        }
    }
    let mut repaired = 0;
    while let Some(small) = (0..n_clients).find(|&n| assignments[n].len() < min_size) {
        let largest = (0..n_clients)
            .max_by(|&a, &b| assignments[a].len().cmp(&assignments[b].len()).then(b.cmp(&a)))
            .expect("n_clients >= 2");
        let moved = assignments[largest].pop().expect("largest client is non-empty");
        assignments[small].push(moved);
        repaired += 1;
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    Ok(Partition::new(
        assignments,
        PartitionParams::Dirichlet {
            alpha,
            min_size,
            repaired,
        },
    ))
}

/// Major-class rotation for client `n`.
pub fn step_major_classes(n: usize, n_major: usize, n_classes: usize) -> Vec<usize> {
    (0..n_major).map(|j| (n * n_major + j) % n_classes).collect()
}

/// "Step" split without replacement: fails with a capacity error when a
/// class cannot meet every client's demand.
pub fn partition_step(
    ds: &Dataset,
    n_clients: usize,
    n_major: usize,
    major_per: usize,
    minor_per: usize,
    seed: u64,
) -> Result<Partition> {
    partition_step_with(ds, n_clients, n_major, major_per, minor_per, false, seed)
}

/// "Step" split. Client `n` takes `major_per` samples from each of its
/// rotated major classes and `minor_per` from every other class. With
/// `allow_replacement`, a class that runs dry wraps around its shuffled
/// sample list and the reuse count is recorded.
pub fn partition_step_with(
    ds: &Dataset,
    n_clients: usize,
    n_major: usize,
    major_per: usize,
    minor_per: usize,
    allow_replacement: bool,
    seed: u64,
) -> Result<Partition> {
    let n_classes = ds.n_classes();
    if n_clients == 0 {
        return Err(Error::Argument("need at least 1 client".into()));
    }
    if n_major >= n_classes {
        return Err(Error::Argument(format!(
            "n_major={n_major} must be below n_classes={n_classes}"
        )));
    }
    if major_per == 0 && minor_per == 0 {
        return Err(Error::Argument("major_per and minor_per cannot both be 0".into()));
    }
    let majors: Vec<Vec<usize>> = (0..n_clients)
        .map(|n| step_major_classes(n, n_major, n_classes))
        .collect();
    let root = SeedPath::new(seed).purpose(Purpose::Partition);
    let mut assignments = vec![Vec::new(); n_clients];
    let mut replaced = 0;
    for (c, mut idx) in ds.class_indices().into_iter().enumerate() {
        let demand: usize = majors
            .iter()
            .map(|m| if m.contains(&c) { major_per } else { minor_per })
            .sum();
        if demand > idx.len() && (!allow_replacement || idx.is_empty()) {
            return Err(Error::Capacity {
                class: c,
                demand,
                supply: idx.len(),
            });
        }
        derive_rng(&root.child(c as u64)).shuffle(&mut idx);
        let mut cursor = 0;
        for (n, m) in majors.iter().enumerate() {
            let take = if m.contains(&c) { major_per } else { minor_per };
            for _ in 0..take {
                if cursor >= idx.len() {
                    replaced += 1;
                }
                assignments[n].push(idx[cursor % idx.len()]);
                cursor += 1;
            }
        }
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    Ok(Partition::new(
        assignments,
        PartitionParams::Step {
            n_major,
            major_per,
            minor_per,
            replaced,
        },
    ))
}
