//! Datasets: in-memory store with declared train/test/defender splits,
//! a seed-deterministic synthetic generator, and directory/binary ingestion.

mod directory;
mod synthetic;

pub use directory::{export_dataset, load_directory_dataset, DirectoryLayout};
pub use synthetic::make_synthetic_dataset;

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{child_seed, shuffled_indices};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic { classes: usize, per_class: usize, image_size: usize },
    Directory { path: PathBuf, layout: DirectoryLayout },
}

/// Index-based split assignment over the flat sample store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub defender: Vec<usize>,
}

impl Splits {
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (name, idx) in
            [("train", &self.train), ("test", &self.test), ("defender", &self.defender)]
        {
            for &i in idx.iter() {
                if i >= n {
                    return Err(Error::Input(format!("{name} split index {i} out of range {n}")));
                }
                if seen[i] {
                    return Err(Error::Input(format!("sample {i} assigned to two splits")));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

/// Per-channel normalization constants applied when batches are materialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn is_identity(&self) -> bool {
        self.mean.iter().all(|&m| m == 0.0) && self.std.iter().all(|&s| s == 1.0)
    }
}

/// The defender's clean data, carved out of the held-out defender pool:
/// a small subset for noise/mask optimization, a larger one for fine-tuning,
/// and the remainder for scoring verdicts.
#[derive(Debug, Clone)]
pub struct DefenderSubsets {
    pub detect: Vec<usize>,
    pub defense: Vec<usize>,
    pub scoring: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub image_shape: (usize, usize, usize),
    pub splits: Splits,
    pub source: DatasetSource,
    pub seed: u64,
    pub normalization: Normalization,
}

impl DatasetHandle {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Materialize a batch from sample indices, applying normalization.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!("sample index {i} out of range {}", self.len())));
            }
        }
        let mut inputs = self.images.select(ndarray::Axis(0), indices);
        if !self.normalization.is_identity() {
            let (c, _, _) = self.image_shape;
            for ci in 0..c {
                let m = self.normalization.mean[ci];
                let s = self.normalization.std[ci];
                inputs
                    .index_axis_mut(ndarray::Axis(1), ci)
                    .mapv_inplace(|v| (v - m) / s);
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Batch::new(inputs, labels, self.num_classes)
    }

    pub fn train_batch(&self) -> Result<Batch> {
        self.batch(&self.splits.train)
    }

    pub fn test_batch(&self) -> Result<Batch> {
        self.batch(&self.splits.test)
    }

    /// Carve the defender pool into detection / defense / scoring subsets.
    /// Fractions are relative to the training-set size, per the threat model
    /// where the defender holds a few local clean samples.
    pub fn defender_subsets(
        &self,
        detect_fraction: f32,
        defense_fraction: f32,
        seed: u64,
    ) -> Result<DefenderSubsets> {
        if !(0.0..=1.0).contains(&detect_fraction) || !(0.0..=1.0).contains(&defense_fraction) {
            return Err(Error::Input("defender fractions must lie in [0, 1]".into()));
        }
        let train_n = self.splits.train.len();
        let pool = &self.splits.defender;
        let detect_n = ((detect_fraction * train_n as f32).ceil() as usize).max(1);
        let defense_n = ((defense_fraction * train_n as f32).ceil() as usize).max(1);
        if detect_n + defense_n >= pool.len() {
            return Err(Error::Input(format!(
                "defender pool has {} samples, need more than {} for detection+defense",
                pool.len(),
                detect_n + defense_n
            )));
        }
        let order = shuffled_indices(pool.len(), child_seed(seed, "defender-subsets"));
        let pick = |range: std::ops::Range<usize>| range.map(|i| pool[order[i]]).collect();
        Ok(DefenderSubsets {
            detect: pick(0..detect_n),
            defense: pick(detect_n..detect_n + defense_n),
            scoring: pick(detect_n + defense_n..pool.len()),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.splits.validate(self.len())?;
        if self.labels.iter().any(|&l| l >= self.num_classes) {
            return Err(Error::Input("label out of class range".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
