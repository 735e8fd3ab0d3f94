use std::str::FromStr;

use super::Dataset;
use crate::numkernel::{derive_rng, Purpose, SeedPath};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    /// Additive N(0, ε²) on every feature, clamped back into [0, 1].
    #[default]
    FeatureGauss,
    /// Each label replaced with probability ε by a different random class.
    LabelFlip,
}

impl NoiseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMode::FeatureGauss => "feature_gauss",
            NoiseMode::LabelFlip => "label_flip",
        }
    }
}

impl FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature_gauss" => Ok(NoiseMode::FeatureGauss),
            "label_flip" => Ok(NoiseMode::LabelFlip),
            other => Err(Error::Argument(format!(
                "unknown noise mode {other:?} (expected feature_gauss or label_flip)"
            ))),
        }
    }
}

pub fn inject_noise(ds: &Dataset, epsilon: f64, mode: NoiseMode, seed: u64) -> Result<Dataset> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Argument(format!("noise level must be >= 0, got {epsilon}")));
    }
    let mut out = ds.clone();
    if epsilon == 0.0 {
        return Ok(out);
    }
    let mut rng = derive_rng(&SeedPath::new(seed).purpose(Purpose::Noise));
    match mode {
        NoiseMode::FeatureGauss => {
            for v in out.features_mut() {
                *v = (*v + epsilon * rng.normal()).clamp(0.0, 1.0);
            }
        }
        NoiseMode::LabelFlip => {
            if epsilon > 1.0 {
                return Err(Error::Argument(format!(
                    "label flip probability must be <= 1, got {epsilon}"
                )));
            }
            let c = ds.n_classes();
            if c < 2 {
                return Err(Error::Argument("label flipping needs at least 2 classes".into()));
            }
            for y in out.labels_mut() {
                if rng.uniform() < epsilon {
                    let shift = 1 + rng.below(c - 1);
                    *y = (*y + shift) % c;
                }
            }
        }
    }
    Ok(out)
}

/// Stratified indices: `ceil(fraction * class_count)` per class, ascending.
pub fn subsample_indices(ds: &Dataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let root = SeedPath::new(seed).purpose(Purpose::Subsample);
    let mut keep = Vec::new();
    for (c, mut idx) in ds.class_indices().into_iter().enumerate() {
        let k = ((fraction * idx.len() as f64).ceil() as usize).min(idx.len());
        if k < idx.len() {
            derive_rng(&root.child(c as u64)).shuffle(&mut idx);
        }
        keep.extend_from_slice(&idx[..k]);
    }
    keep.sort_unstable();
    Ok(keep)
}

pub fn subsample(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    Ok(ds.select(&subsample_indices(ds, fraction, seed)?))
}
