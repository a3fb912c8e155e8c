//! Model-zoo orchestration: train batches of clean and backdoored models with
//! distinct seeds, checkpoint them with their metrics, run detection across
//! the zoo, and emit timing tables. Models are independent, so building and
//! detection parallelize at model granularity; each model's pipeline is
//! internally sequential and fully seeded.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::attack::{asr, benign_accuracy, poison_dataset, train_backdoor, PoisonSpec};
use crate::checkpoint::{load_checkpoint, save_checkpoint, SeedProvenance};
use crate::config::ExperimentConfig;
use crate::data::{export_dataset, DatasetHandle, DirectoryLayout};
use crate::detect::{detect, DetectionSettings, ZooReport, ZooVerdict};
use crate::error::{Error, Result};
use crate::model::{build_model, train, TrainHyper};
use crate::nc::{nc_detect, NcConfig};
use crate::rng::{child_seed, child_seed_indexed};

/// One attack column of the zoo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSpec {
    pub name: String,
    /// Template; the per-model seed is derived from the model seed.
    pub poison: PoisonSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZooEntry {
    pub id: String,
    pub dir: PathBuf,
    pub attack: String,
    pub is_backdoored: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poison: Option<PoisonSpec>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ba: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asr: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZooManifest {
    pub entries: Vec<ZooEntry>,
    pub dataset_file: PathBuf,
    pub config: ExperimentConfig,
}

impl ZooManifest {
    pub fn load(zoo_dir: &Path) -> Result<Self> {
        let path = zoo_dir.join("manifest.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Ingestion { path: path.clone(), msg: e.to_string() })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, zoo_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(zoo_dir)?;
        let tmp = zoo_dir.join("manifest.json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(tmp, zoo_dir.join("manifest.json"))?;
        Ok(())
    }
}

struct ModelJob {
    id: String,
    attack: Option<AttackSpec>,
    seed: u64,
}

fn train_one(
    job: &ModelJob,
    config: &ExperimentConfig,
    data: &DatasetHandle,
    zoo_dir: &Path,
) -> ZooEntry {
    let dir = zoo_dir.join("models").join(&job.id);
    let attack_name = job.attack.as_ref().map(|a| a.name.clone()).unwrap_or_else(|| "clean".into());
    let mut entry = ZooEntry {
        id: job.id.clone(),
        dir: dir.clone(),
        attack: attack_name,
        is_backdoored: job.attack.is_some(),
        poison: None,
        seed: job.seed,
        ba: None,
        asr: None,
        val_accuracy: None,
        train_error: None,
    };
    let outcome = (|| -> Result<()> {
        let arch = config.arch_descriptor()?;
        let mut model = build_model(
            &arch,
            data.image_shape,
            data.num_classes,
            child_seed(job.seed, "init"),
        )?;
        let hyper = TrainHyper { seed: child_seed(job.seed, "train"), ..config.train.clone() };
        let train_set = data.train_batch()?;
        match &job.attack {
            Some(attack) => {
                let spec = PoisonSpec {
                    seed: child_seed(job.seed, "poison"),
                    ..attack.poison.clone()
                };
                let poisoned = poison_dataset(&train_set, &spec, data.num_classes)?;
                let report = train_backdoor(&mut model, &poisoned, &hyper)?;
                entry.val_accuracy = Some(report.val_accuracy);
                let test = data.test_batch()?;
                entry.ba = Some(benign_accuracy(&model, &test)?);
                entry.asr = Some(asr(&model, &test, &spec)?);
                entry.poison = Some(spec);
            }
            None => {
                train(&mut model, &train_set, &hyper)?;
                let test = data.test_batch()?;
                entry.ba = Some(benign_accuracy(&model, &test)?);
            }
        }
        save_checkpoint(
            &model,
            &dir,
            None,
            SeedProvenance {
                root_seed: child_seed(job.seed, "init"),
                labels: vec!["init".into(), "train".into(), "poison".into()],
            },
        )?;
        Ok(())
    })();
    if let Err(e) = outcome {
        entry.train_error = Some(e.to_string());
    }
    entry
}

/// Train and checkpoint `n_clean` clean models plus `n_per_attack` models per
/// attack, with distinct derived seeds. Failures are recorded per entry and
/// the zoo continues.
pub fn build_zoo(
    config: &ExperimentConfig,
    data: &DatasetHandle,
    zoo_dir: &Path,
    n_clean: usize,
    n_per_attack: usize,
    attacks: &[AttackSpec],
) -> Result<ZooManifest> {
    if n_clean == 0 && (attacks.is_empty() || n_per_attack == 0) {
        return Err(Error::Input("zoo needs at least one model".into()));
    }
    std::fs::create_dir_all(zoo_dir.join("models"))?;
    let dataset_file = zoo_dir.join("dataset.ngd");
    export_dataset(data, &dataset_file, DirectoryLayout::BinaryRecord)?;

    let mut jobs = Vec::new();
    for i in 0..n_clean {
        jobs.push(ModelJob {
            id: format!("clean_{i}"),
            attack: None,
            seed: child_seed_indexed(config.root_seed, "zoo-clean", i as u64),
        });
    }
    for attack in attacks {
        for i in 0..n_per_attack {
            jobs.push(ModelJob {
                id: format!("{}_{i}", attack.name),
                attack: Some(attack.clone()),
                seed: child_seed_indexed(config.root_seed, &format!("zoo-{}", attack.name), i as u64),
            });
        }
    }

    let entries: Vec<ZooEntry> =
        jobs.par_iter().map(|job| train_one(job, config, data, zoo_dir)).collect();
    let manifest = ZooManifest { entries, dataset_file, config: config.clone() };
    manifest.save(zoo_dir)?;
    Ok(manifest)
}

/// Detection over every healthy zoo entry. Scoring uses the defender pool's
/// scoring subset; optimization uses its detection subset.
pub fn detect_zoo(
    manifest: &ZooManifest,
    data: &DatasetHandle,
    settings: &DetectionSettings,
) -> Result<(ZooReport, Vec<ZooVerdict>)> {
    let subsets = data.defender_subsets(
        manifest.config.detection.detect_fraction,
        manifest.config.defense_fraction,
        settings.seed,
    )?;
    let opt = data.batch(&subsets.detect)?;
    let score = data.batch(&subsets.scoring)?;

    let verdicts: Result<Vec<ZooVerdict>> = manifest
        .entries
        .par_iter()
        .filter(|e| e.train_error.is_none())
        .map(|entry| {
            let (model, _, _) = load_checkpoint(&entry.dir)?;
            let per_model = DetectionSettings {
                seed: child_seed(settings.seed, &entry.id),
                ..settings.clone()
            };
            let verdict = detect(&model, &opt, &score, &per_model)?;
            Ok(ZooVerdict {
                model_id: entry.id.clone(),
                attack: entry.attack.clone(),
                is_backdoored: entry.is_backdoored,
                verdict,
            })
        })
        .collect();
    let verdicts = verdicts?;
    Ok((ZooReport::from_verdicts(&verdicts), verdicts))
}

/// Run the inversion baseline over the zoo, returning per-model verdicts with
/// wall clocks.
pub fn nc_zoo(
    manifest: &ZooManifest,
    data: &DatasetHandle,
    cfg: &NcConfig,
) -> Result<Vec<(String, bool, crate::nc::NcVerdict)>> {
    let subsets = data.defender_subsets(
        manifest.config.detection.detect_fraction,
        manifest.config.defense_fraction,
        cfg.seed,
    )?;
    let opt = data.batch(&subsets.detect)?;
    manifest
        .entries
        .par_iter()
        .filter(|e| e.train_error.is_none())
        .map(|entry| {
            let (model, _, _) = load_checkpoint(&entry.dir)?;
            let per_model = NcConfig { seed: child_seed(cfg.seed, &entry.id), ..cfg.clone() };
            let verdict = nc_detect(&model, &opt, &per_model)?;
            Ok((entry.id.clone(), entry.is_backdoored, verdict))
        })
        .collect()
}

/// Mean seconds per model for each detection method, ascending.
pub fn timing_report(methods: &[(String, Vec<f64>)]) -> String {
    let mut rows: Vec<(String, f64)> = methods
        .iter()
        .filter(|(_, times)| !times.is_empty())
        .map(|(name, times)| (name.clone(), times.iter().sum::<f64>() / times.len() as f64))
        .collect();
    rows.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let mut out = String::from("method,mean_seconds_per_model\n");
    for (name, mean) in rows {
        out.push_str(&format!("{name},{mean:.3}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{LabelMap, TriggerSpec};
    use crate::config::DatasetConfig;
    use tempfile::tempdir;

    fn tiny_config(root: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk_default(root);
        cfg.dataset = DatasetConfig::Synthetic { classes: 3, per_class: 60, image_size: 8 };
        cfg.train = TrainHyper {
            epochs: 4,
            batch_size: 16,
            lr_milestones: vec![3],
            seed: 0,
            ..TrainHyper::default()
        };
        cfg
    }

    #[test]
    fn zoo_counts_checkpoints_and_manifest() {
        let cfg = tiny_config(5);
        let data = cfg.build_dataset().unwrap();
        let dir = tempdir().unwrap();
        let attacks = vec![AttackSpec {
            name: "patch".into(),
            poison: PoisonSpec {
                trigger: TriggerSpec::default_patch(),
                label_map: LabelMap::AllToOne { target: 0 },
                rate: 0.1,
                seed: 0,
            },
        }];
        let manifest = build_zoo(&cfg, &data, dir.path(), 1, 1, &attacks).unwrap();
        assert_eq!(manifest.entries.len(), 2);
        assert!(dir.path().join("models/clean_0/manifest.json").exists());
        assert!(dir.path().join("models/patch_0/weights.bin").exists());
        assert!(dir.path().join("dataset.ngd").exists());

        // Manifest metrics match re-evaluation of the stored checkpoints.
        let test = data.test_batch().unwrap();
        for entry in &manifest.entries {
            let (model, _, _) = load_checkpoint(&entry.dir).unwrap();
            let ba = benign_accuracy(&model, &test).unwrap();
            assert!((ba - entry.ba.unwrap()).abs() < 1e-6);
            if let Some(spec) = &entry.poison {
                let a = asr(&model, &test, spec).unwrap();
                assert!((a - entry.asr.unwrap()).abs() < 1e-6);
            }
        }
        let reloaded = ZooManifest::load(dir.path()).unwrap();
        assert_eq!(reloaded.entries.len(), 2);
    }

    #[test]
    fn timing_rows_sorted_ascending() {
        let csv = timing_report(&[
            ("slow".into(), vec![5.0, 7.0]),
            ("fast".into(), vec![1.0, 2.0]),
        ]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "method,mean_seconds_per_model");
        assert!(lines[1].starts_with("fast,1.5"));
        assert!(lines[2].starts_with("slow,6.0"));
    }
}
