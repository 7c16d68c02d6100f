use crate::error::{Error, Result};

/// Row-major feature matrix with aligned integer class labels.
///
/// Always holds at least one row, and every label is below `num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset("dataset needs at least one row".into()));
        }
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch { expected: labels.len() * dim, got: features.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Config(format!("label {bad} outside class range 0..{num_classes}")));
        }
        Ok(Dataset { features, labels, dim, num_classes })
    }

    /// Builds a dataset from row vectors.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: r.len() });
        }
        Dataset::new(rows.concat(), labels, dim, num_classes)
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
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

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.features.chunks_exact(self.dim).zip(self.labels.iter().copied())
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange { index: i, len: self.len() });
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, labels, self.dim, self.num_classes)
    }

    /// Stacks datasets that share dimension and label space.
    pub fn concat<'a, I>(parts: I) -> Result<Dataset>
    where
        I: IntoIterator<Item = &'a Dataset>,
    {
        let mut iter = parts.into_iter();
        let first = iter.next().ok_or_else(|| Error::EmptyDataset("nothing to concatenate".into()))?;
        let mut features = first.features.clone();
        let mut labels = first.labels.clone();
        for d in iter {
            if d.dim != first.dim {
                return Err(Error::DimensionMismatch { expected: first.dim, got: d.dim });
            }
            if d.num_classes != first.num_classes {
                return Err(Error::Config("label spaces differ".into()));
            }
            features.extend_from_slice(&d.features);
            labels.extend_from_slice(&d.labels);
        }
        Dataset::new(features, labels, first.dim, first.num_classes)
    }

    /// Row indices grouped by label; entry `c` lists rows of class `c` in order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Same rows with a wider label space.
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Dataset> {
        if self.labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::Config(format!("labels do not fit in {num_classes} classes")));
        }
        self.num_classes = num_classes;
        Ok(self)
    }
}
