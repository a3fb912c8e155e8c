//! Dataset poisoning, backdoored training, and attack evaluation.

mod trigger;

pub use trigger::{apply_trigger, Corner, PatternSource, Phase, ResolvedTrigger, TriggerSpec};

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predictions, train, Batch, LayeredClassifier, TrainHyper, TrainReport};
use crate::rng::{child_seed, shuffled_indices};

/// Label relabeling applied to poisoned samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LabelMap {
    AllToOne { target: usize },
    AllToAll,
}

impl LabelMap {
    pub fn apply(&self, label: usize, num_classes: usize) -> usize {
        match self {
            LabelMap::AllToOne { target } => *target,
            LabelMap::AllToAll => (label + 1) % num_classes,
        }
    }
}

/// A complete poisoning recipe: trigger, label map, rate, seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonSpec {
    pub trigger: TriggerSpec,
    pub label_map: LabelMap,
    pub rate: f32,
    pub seed: u64,
}

/// Poisoned dataset with bookkeeping: positions refer to the output ordering.
#[derive(Debug, Clone)]
pub struct PoisonedDataset {
    pub data: Batch,
    pub poisoned_positions: Vec<usize>,
    pub clean_positions: Vec<usize>,
}

/// Replace a seeded `round(rate * n)` subset with triggered, relabeled
/// versions (dirty-label), then reshuffle the sample order.
pub fn poison_dataset(data: &Batch, spec: &PoisonSpec, num_classes: usize) -> Result<PoisonedDataset> {
    if !(0.0..=1.0).contains(&spec.rate) {
        return Err(Error::Input(format!("poison rate {} not in [0,1]", spec.rate)));
    }
    if data.is_empty() {
        return Err(Error::Input("cannot poison an empty dataset".into()));
    }
    if let LabelMap::AllToOne { target } = spec.label_map {
        if target >= num_classes {
            return Err(Error::Input(format!("target class {target} out of range")));
        }
    }
    let n = data.len();
    let shape = (data.inputs.shape()[1], data.inputs.shape()[2], data.inputs.shape()[3]);
    let trigger = ResolvedTrigger::new(&spec.trigger, shape)?;

    let n_poison = (spec.rate * n as f32).round() as usize;
    let selection = shuffled_indices(n, child_seed(spec.seed, "poison-select"));
    let poisoned_set: std::collections::HashSet<usize> =
        selection[..n_poison].iter().copied().collect();

    let mut inputs = data.inputs.clone();
    let mut labels = data.labels.clone();
    for &i in &selection[..n_poison] {
        let img = data.inputs.index_axis(Axis(0), i).to_owned();
        let triggered = trigger.apply(&img, Phase::Train);
        inputs.index_axis_mut(Axis(0), i).assign(&triggered);
        labels[i] = spec.label_map.apply(data.labels[i], num_classes);
    }

    // Reshuffle the output order so poisoned samples are interleaved.
    let order = shuffled_indices(n, child_seed(spec.seed, "poison-shuffle"));
    let shuffled_inputs = inputs.select(Axis(0), &order);
    let shuffled_labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    let mut poisoned_positions = Vec::with_capacity(n_poison);
    let mut clean_positions = Vec::with_capacity(n - n_poison);
    for (pos, &orig) in order.iter().enumerate() {
        if poisoned_set.contains(&orig) {
            poisoned_positions.push(pos);
        } else {
            clean_positions.push(pos);
        }
    }

    Ok(PoisonedDataset {
        data: Batch::new(shuffled_inputs, shuffled_labels, num_classes)?,
        poisoned_positions,
        clean_positions,
    })
}

/// Report from backdoored training: the recorded 90/10 fit/validation split
/// and the validation accuracy at the end.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackdoorTrainReport {
    pub train: TrainReport,
    pub fit_size: usize,
    pub val_size: usize,
    pub val_accuracy: f32,
}

/// Train on a poisoned dataset using a 90/10 fit/validation split.
pub fn train_backdoor(
    model: &mut LayeredClassifier,
    poisoned: &PoisonedDataset,
    hyper: &TrainHyper,
) -> Result<BackdoorTrainReport> {
    let n = poisoned.data.len();
    let order = shuffled_indices(n, child_seed(hyper.seed, "train-val-split"));
    let fit_size = (n as f32 * 0.9).round() as usize;
    let fit = poisoned.data.select(&order[..fit_size]);
    let val = poisoned.data.select(&order[fit_size..]);
    let report = train(model, &fit, hyper)?;
    let val_accuracy = if val.is_empty() {
        f32::NAN
    } else {
        let preds = predictions(model, &val)?;
        preds.iter().zip(&val.labels).filter(|(p, l)| p == l).count() as f32 / val.len() as f32
    };
    Ok(BackdoorTrainReport { train: report, fit_size, val_size: n - fit_size, val_accuracy })
}

/// Attack success rate on held-out clean data.
///
/// All-to-one: the fraction of non-target-class samples whose triggered
/// version lands on the target. All-to-all: the fraction of all samples whose
/// triggered version lands on `(y + 1) mod C`.
pub fn asr(model: &LayeredClassifier, test: &Batch, spec: &PoisonSpec) -> Result<f32> {
    let num_classes = model.num_classes;
    let shape = (test.inputs.shape()[1], test.inputs.shape()[2], test.inputs.shape()[3]);
    let trigger = ResolvedTrigger::new(&spec.trigger, shape)?;

    let eligible: Vec<usize> = match spec.label_map {
        LabelMap::AllToOne { target } => {
            (0..test.len()).filter(|&i| test.labels[i] != target).collect()
        }
        LabelMap::AllToAll => (0..test.len()).collect(),
    };
    if eligible.is_empty() {
        return Err(Error::Evaluation("no eligible samples for ASR".into()));
    }

    let mut triggered = test.select(&eligible);
    for mut img in triggered.inputs.axis_iter_mut(Axis(0)) {
        let t = trigger.apply(&img.to_owned(), Phase::Test);
        img.assign(&t);
    }
    let preds = predictions(model, &triggered)?;
    let hits = preds
        .iter()
        .zip(&triggered.labels)
        .filter(|(&p, &l)| p == spec.label_map.apply(l, num_classes))
        .count();
    Ok(hits as f32 / eligible.len() as f32)
}

/// Clean top-1 accuracy.
pub fn benign_accuracy(model: &LayeredClassifier, test: &Batch) -> Result<f32> {
    crate::model::accuracy(model, test)
}

#[cfg(test)]
mod tests;
