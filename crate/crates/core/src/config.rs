//! Experiment configuration: one JSON document drives dataset construction,
//! training, detection and defense. Every stochastic stage derives its seed
//! from the root seed by name, so re-running a config reproduces artifacts.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::attack::PoisonSpec;
use crate::data::{load_directory_dataset, make_synthetic_dataset, DatasetHandle, DirectoryLayout};
use crate::defense::DefenseConfig;
use crate::detect::{DetectionMode, DetectionSettings};
use crate::error::Result;
use crate::model::{ArchDescriptor, TrainHyper};
use crate::rng::child_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic { classes: usize, per_class: usize, image_size: usize },
    Directory { path: PathBuf, layout: DirectoryLayout },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub epsilon: f32,
    pub tau: f32,
    pub lambda1: f32,
    pub mode: DetectionMode,
    /// Fraction of the training-set size used for noise/mask optimization.
    pub detect_fraction: f32,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            epsilon: 0.3,
            tau: 0.5,
            lambda1: 0.75,
            mode: DetectionMode::AllToOne,
            detect_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    /// Registry architecture name: `cnn`, `cnn_bn` or `mlp`.
    pub architecture: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poison: Option<PoisonSpec>,
    pub train: TrainHyper,
    pub detection: DetectionConfig,
    pub defense_lambda2: f32,
    pub defense_epochs: usize,
    pub defense_learning_rate: f32,
    pub defense_fraction: f32,
    pub root_seed: u64,
}

impl ExperimentConfig {
    /// Desk-scale defaults on the synthetic ten-class set.
    pub fn desk_default(root_seed: u64) -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::Synthetic { classes: 10, per_class: 400, image_size: 16 },
            architecture: "cnn".into(),
            poison: None,
            train: TrainHyper { seed: child_seed(root_seed, "train"), ..TrainHyper::default() },
            detection: DetectionConfig::default(),
            defense_lambda2: 0.5,
            defense_epochs: 25,
            defense_learning_rate: 0.005,
            defense_fraction: 0.05,
            root_seed,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::Ingestion {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn arch_descriptor(&self) -> Result<ArchDescriptor> {
        ArchDescriptor::by_name(&self.architecture)
    }

    /// Materialize the dataset, seeded from the root.
    pub fn build_dataset(&self) -> Result<DatasetHandle> {
        match &self.dataset {
            DatasetConfig::Synthetic { classes, per_class, image_size } => make_synthetic_dataset(
                *classes,
                *per_class,
                *image_size,
                child_seed(self.root_seed, "dataset"),
            ),
            DatasetConfig::Directory { path, layout } => load_directory_dataset(path, *layout),
        }
    }

    /// Detection settings seeded from the root.
    pub fn detection_settings(&self) -> DetectionSettings {
        DetectionSettings {
            epsilon: self.detection.epsilon,
            tau: self.detection.tau,
            lambda1: self.detection.lambda1,
            mode: self.detection.mode,
            ..DetectionSettings::new(self.detection.epsilon, child_seed(self.root_seed, "detect"))
        }
    }

    /// Defense configuration seeded from the root.
    pub fn defense_config(&self) -> DefenseConfig {
        DefenseConfig {
            lambda2: self.defense_lambda2,
            epochs: self.defense_epochs,
            learning_rate: self.defense_learning_rate,
            data_fraction: self.defense_fraction,
            ..DefenseConfig::new(self.detection.epsilon, child_seed(self.root_seed, "defense"))
        }
    }
}
