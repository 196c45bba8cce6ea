//! Datasets and their partitioning across clients.

mod idx;
mod partition;

pub use idx::{load_idx, read_idx, write_idx, IdxArray};
pub use partition::{client_train_test_split, dirichlet_partition, holdout_ood, PartitionPlan};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Tensor;
use crate::metavd::Batch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("dataset must contain at least one sample".into()));
        }
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::shape("dataset features", &[labels.len(), features.cols()], features.shape()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Ok(Batch {
            features: self.features.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Sample indices grouped by class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub clusters_per_class: usize,
    /// Standard deviation of samples around their cluster centre.
    pub noise: f64,
    pub n: usize,
    /// Standard deviation of the cluster centres around the origin.
    #[serde(default = "default_center_scale")]
    pub center_scale: f64,
}

fn default_center_scale() -> f64 {
    1.0
}

/// Gaussian-cluster classification data with balanced labels.
pub fn gen_synthetic(spec: &SyntheticSpec, rng: &mut impl Rng) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.dim == 0 || spec.clusters_per_class == 0 || spec.n == 0 {
        return Err(Error::InvalidArgument(
            "synthetic data needs positive classes, dim, clusters and n".into(),
        ));
    }
    if !(spec.noise >= 0.0 && spec.center_scale > 0.0) {
        return Err(Error::InvalidArgument("noise must be >= 0 and center scale > 0".into()));
    }
    let centres: Vec<Vec<f64>> = (0..spec.num_classes * spec.clusters_per_class)
        .map(|_| {
            (0..spec.dim)
                .map(|_| spec.center_scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % spec.num_classes).collect();
    labels.shuffle(rng);
    let mut features = Vec::with_capacity(spec.n * spec.dim);
    for &label in &labels {
        let cluster = rng.random_range(0..spec.clusters_per_class);
        let centre = &centres[label * spec.clusters_per_class + cluster];
        features.extend(
            centre
                .iter()
                .map(|c| c + spec.noise * rng.sample::<f64, _>(StandardNormal)),
        );
    }
    Dataset::new(
        Tensor::matrix(spec.n, spec.dim, features)?,
        labels,
        spec.num_classes,
        format!(
            "synthetic-c{}-d{}-k{}",
            spec.num_classes, spec.dim, spec.clusters_per_class
        ),
    )
}
