use crate::bnn::Batch;
use crate::{Error, Result};

/// Labeled samples stored row-major in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("feature dimension must be >= 1".into()));
        }
        if features.len() != dim * labels.len() {
            return Err(Error::dim(
                format!("{} labels x dim {dim}", labels.len()),
                format!("{} feature values", features.len()),
            ));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= n_classes) {
            return Err(Error::Argument(format!(
                "label {y} of sample {i} is not below n_classes={n_classes}"
            )));
        }
        Ok(Self {
            name: name.into(),
            dim,
            features,
            labels,
            n_classes,
        })
    }

    /// Build from per-sample rows.
    pub fn from_rows(name: impl Into<String>, rows: &[Vec<f64>], labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::dim(format!("dim {dim}"), format!("row of {}", bad.len())));
        }
        Self::new(name, dim, rows.concat(), labels, n_classes)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn rows(&self) -> Vec<&[f64]> {
        self.features.chunks_exact(self.dim).collect()
    }

    /// Sample indices grouped by label.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_classes];
        for &y in &self.labels {
            out[y] += 1;
        }
        out
    }

    /// New dataset holding `indices` in the given order (duplicates allowed).
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Self {
            name: self.name.clone(),
            dim: self.dim,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// Concatenate datasets that share dimension and class count.
    pub fn concat(name: impl Into<String>, parts: &[&Dataset]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyDataset)?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dim != first.dim || p.n_classes != first.n_classes {
                return Err(Error::dim(
                    format!("dim {} / {} classes", first.dim, first.n_classes),
                    format!("dim {} / {} classes", p.dim, p.n_classes),
                ));
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        Self::new(name, first.dim, features, labels, first.n_classes)
    }

    /// Minibatch view over `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch<'_>> {
        Batch::new(
            indices.iter().map(|&i| self.row(i)).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Rescale every feature column to [0, 1]; constant columns become 0.
    pub fn normalize_minmax(&mut self) {
        for c in 0..self.dim {
            let col = self.features.iter().skip(c).step_by(self.dim);
            let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
            let span = hi - lo;
            for v in self.features.iter_mut().skip(c).step_by(self.dim) {
                *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
            }
        }
    }

    pub(crate) fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    pub(crate) fn labels_mut(&mut self) -> &mut [usize] {
        &mut self.labels
    }
}
