//! Hierarchical seed derivation.
//!
//! A stream is identified by a master seed plus an ordered path of integers
//! (round, client, purpose, ...). The master seed keys a ChaCha20 generator and
//! the path selects its 64-bit stream id, so two paths never share keystream
//! and a stream never depends on which thread asks for it.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::{Error, Result};

/// Purpose tags used as path components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Synth = 2,
    Noise = 3,
    Subsample = 4,
    Partition = 5,
    Shards = 6,
    BatchOrder = 7,
    TempTrain = 8,
    MetaEval = 9,
    LocalTrain = 10,
    Eval = 11,
    ClientSampling = 12,
    Check = 13,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SeedPath {
    master: u64,
    path: Vec<u64>,
}

impl SeedPath {
    pub fn new(master: u64) -> Self {
        Self {
            master,
            path: Vec::new(),
        }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn components(&self) -> &[u64] {
        &self.path
    }

    /// Extend with one raw component.
    pub fn child(&self, component: u64) -> Self {
        let mut path = self.path.clone();
        path.push(component);
        Self {
            master: self.master,
            path,
        }
    }

    pub fn purpose(&self, p: Purpose) -> Self {
        self.child(p as u64)
    }

    /// `(round, client, purpose)`.
    pub fn client_round(&self, round: u64, client: u64, p: Purpose) -> Self {
        self.child(round).child(client).purpose(p)
    }

    fn stream_id(&self) -> u64 {
        // Length-prefixed so [a] and [a, 0] differ.
        let mut h = splitmix(0x6a09_e667_f3bc_c908 ^ self.path.len() as u64);
        for &c in &self.path {
            h = splitmix(h ^ splitmix(c.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        }
        h
    }

    fn key(&self) -> [u8; 32] {
        let mut key = [0u8; 32];
        let mut s = self.master;
        for chunk in key.chunks_mut(8) {
            s = splitmix(s.wrapping_add(0x9e37_79b9_7f4a_7c15));
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        key
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic random stream bound to one [`SeedPath`].
#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha20Rng,
}

pub fn derive_rng(seed_path: &SeedPath) -> RngStream {
    let mut inner = ChaCha20Rng::from_seed(seed_path.key());
    inner.set_stream(seed_path.stream_id());
    RngStream { inner }
}

/// A fresh 64-bit seed drawn from the stream at `seed_path`.
pub fn derive_seed(seed_path: &SeedPath) -> u64 {
    derive_rng(seed_path).next_u64()
}

impl RngStream {
    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    /// One draw from `Dirichlet(alpha)`.
    ///
    /// Gamma variates are combined in log space, which keeps draws with very
    /// small concentrations on the simplex instead of underflowing to 0/0.
    pub fn dirichlet(&mut self, alpha: &[f64]) -> Result<Vec<f64>> {
        if alpha.is_empty() || alpha.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::Argument(format!(
                "dirichlet concentrations must be positive and finite: {alpha:?}"
            )));
        }
        let mut logs = Vec::with_capacity(alpha.len());
        for &a in alpha {
            // G(a) = G(a + 1) · U^(1/a) for a < 1
            let (shape, boost) = if a < 1.0 { (a + 1.0, true) } else { (a, false) };
            let gamma = Gamma::new(shape, 1.0).map_err(|e| Error::Argument(e.to_string()))?;
            let g: f64 = gamma.sample(&mut self.inner);
            let mut lg = g.ln();
            if boost {
                let u: f64 = 1.0 - self.uniform();
                lg += u.ln() / a;
            }
            logs.push(lg);
        }
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = out.iter().sum();
        for v in &mut out {
            *v /= sum;
        }
        Ok(out)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(p: &SeedPath, n: usize) -> Vec<f64> {
        let mut r = derive_rng(p);
        (0..n).map(|_| r.normal()).collect()
    }

    #[test]
    fn same_path_same_stream() {
        let p = SeedPath::new(42).client_round(1, 1, Purpose::LocalTrain);
        assert_eq!(draws(&p, 1000), draws(&p, 1000));
    }

    #[test]
    fn sibling_paths_differ() {
        let root = SeedPath::new(42);
        let a = draws(&root.child(1).child(1), 1000);
        let b = draws(&root.child(1).child(2), 1000);
        assert_ne!(a, b);
        assert!(a.iter().zip(&b).filter(|(x, y)| x == y).count() == 0);
    }

    #[test]
    fn prefix_paths_differ() {
        let root = SeedPath::new(7);
        assert_ne!(draws(&root.child(3), 8), draws(&root.child(3).child(0), 8));
        assert_ne!(draws(&root, 8), draws(&root.child(0), 8));
    }

    #[test]
    fn master_seed_matters() {
        let p = [1u64, 2, 3];
        let mk = |m| p.iter().fold(SeedPath::new(m), |s, &c| s.child(c));
        assert_ne!(draws(&mk(1), 16), draws(&mk(2), 16));
    }

    #[test]
    fn dirichlet_on_simplex() {
        let mut r = derive_rng(&SeedPath::new(3).child(9));
        for _ in 0..200 {
            let q = r.dirichlet(&[0.1; 5]).unwrap();
            let s: f64 = q.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(q.iter().all(|&v| v >= 0.0 && v.is_finite()));
        }
        assert!(r.dirichlet(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn dirichlet_mean_matches_concentration() {
        let mut r = derive_rng(&SeedPath::new(11));
        let alpha = [0.5, 1.0, 2.5];
        let total: f64 = alpha.iter().sum();
        let n = 20_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            for (a, v) in acc.iter_mut().zip(r.dirichlet(&alpha).unwrap()) {
                *a += v;
            }
        }
        for i in 0..3 {
            assert!((acc[i] / n as f64 - alpha[i] / total).abs() < 0.01, "{i}");
        }
    }

    #[test]
    fn normal_moments() {
        let mut r = derive_rng(&SeedPath::new(5));
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.03);
    }
}
