//! Datasets, synthetic generation, IDX ingestion and client partitioning.

mod idx;
mod partition;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC};
pub use partition::{partition_dirichlet, partition_label_split, DirichletConfig, PartitionPlan};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::Batch;
use crate::{rng, Error, Result};

/// Labelled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::EmptyDataset("dataset has no samples".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::InvalidArgument(format!("label {bad} >= class count {class_count}")));
        }
        Ok(Self { features, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch::new(self.features.view(), &self.labels).expect("dataset invariants")
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!("index {bad} out of bounds for {} samples", self.len())));
        }
        let features = self.features.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(features, labels, self.class_count)
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Randomly holds out `test_fraction` of the samples.
    ///
    /// Returns `(train, test)`.
    pub fn split_holdout(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("test fraction must be in (0, 1), got {test_fraction}")));
        }
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        if n_test == 0 || n_test == self.len() {
            return Err(Error::InvalidArgument(format!(
                "test fraction {test_fraction} leaves an empty split of {} samples",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::rng_from(seed));
        let (test, train) = order.split_at(n_test);
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }
}

/// Parameters of the Gaussian-blob generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub dims: usize,
    pub per_class: usize,
    #[serde(default = "SyntheticConfig::default_spread")]
    pub spread: f64,
}

impl SyntheticConfig {
    fn default_spread() -> f64 {
        3.0
    }
}

/// One isotropic unit-variance Gaussian blob per class.
///
/// Class centres are random unit vectors scaled by `spread`. Samples are laid
/// out class by class.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    let SyntheticConfig { classes, dims, per_class, spread } = *cfg;
    if classes < 2 || dims < 2 || per_class < 1 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs classes >= 2, dims >= 2, per_class >= 1 (got {classes}, {dims}, {per_class})"
        )));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::InvalidArgument(format!("spread must be finite and >= 0, got {spread}")));
    }
    let mut rng = rng::rng_from(seed);
    let mut centers = Array2::<f64>::zeros((classes, dims));
    for mut c in centers.rows_mut() {
        loop {
            c.mapv_inplace(|_| StandardNormal.sample(&mut rng));
            let norm = c.dot(&c).sqrt();
            if norm > 1e-9 {
                c *= spread / norm;
                break;
            }
        }
    }
    let n = classes * per_class;
    let mut features = Array2::<f64>::zeros((n, dims));
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        let class = i / per_class;
        for (x, &m) in row.iter_mut().zip(centers.row(class)) {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *x = m + noise;
        }
        labels.push(class);
    }
    Dataset::new(features, labels, classes)
}
