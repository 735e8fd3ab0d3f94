use super::Dataset;
use crate::numkernel::{derive_rng, Purpose, SeedPath};
use crate::{Error, Result};

/// Gaussian blobs around unit-sphere centers, min-max normalized to [0, 1].
///
/// Class `c` is centered at a direction drawn from the `(seed, Synth, c)`
/// stream; samples are `center + spread * N(0, I)`, emitted class by class.
pub fn synth_blobs(n_classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if n_classes == 0 || dim == 0 || per_class == 0 {
        return Err(Error::Argument("n_classes, dim and per_class must be >= 1".into()));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::Argument(format!("spread must be > 0, got {spread}")));
    }
    let root = SeedPath::new(seed).purpose(Purpose::Synth);
    let mut features = Vec::with_capacity(n_classes * per_class * dim);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for c in 0..n_classes {
        let mut rng = derive_rng(&root.child(c as u64));
        let center = loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                break v.into_iter().map(|x| x / norm).collect::<Vec<_>>();
            }
        };
        for _ in 0..per_class {
            features.extend(center.iter().map(|m| m + spread * rng.normal()));
            labels.push(c);
        }
    }
    let mut ds = Dataset::new("blobs", dim, features, labels, n_classes)?;
    ds.normalize_minmax();
    Ok(ds)
}
