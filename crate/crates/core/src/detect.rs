//! Backdoor detection: optimize neuron noise, decouple features with a mask,
//! then score how concentrated the noised negative-mask predictions are.

use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::decouple::{
    feature_loss_diagnostics, masked_noised_predict, optimize_mask, MaskConfig, MaskDiagnostics,
};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Batch, LayeredClassifier, ParamSelection};
use crate::noise::{pgd_maximize, PgdConfig, UpdateRule};
use crate::rng::child_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMode {
    AllToOne,
    AllToAll,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionSettings {
    pub epsilon: f32,
    pub tau: f32,
    pub lambda1: f32,
    pub mode: DetectionMode,
    pub seed: u64,
    pub pgd_steps: usize,
    pub mask_epochs: usize,
    pub mask_learning_rate: f32,
    pub mask_batch_size: usize,
    pub selection: ParamSelection,
    pub update: UpdateRule,
}

impl DetectionSettings {
    pub fn new(epsilon: f32, seed: u64) -> Self {
        DetectionSettings {
            epsilon,
            tau: 0.5,
            lambda1: 0.75,
            mode: DetectionMode::AllToOne,
            seed,
            pgd_steps: 30,
            mask_epochs: 20,
            mask_learning_rate: 0.01,
            mask_batch_size: 16,
            selection: ParamSelection::default(),
            update: UpdateRule::Signed,
        }
    }

    pub fn pgd_config(&self) -> PgdConfig {
        PgdConfig {
            epsilon: self.epsilon,
            steps: self.pgd_steps,
            step_size: None,
            selection: self.selection,
            update: self.update,
            seed: child_seed(self.seed, "noise"),
        }
    }

    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig {
            lambda1: self.lambda1,
            epochs: self.mask_epochs,
            learning_rate: self.mask_learning_rate,
            batch_size: self.mask_batch_size,
            seed: child_seed(self.seed, "mask"),
        }
    }
}

/// Estimated attack target: a single class for all-to-one, the empirical
/// per-class argmax map for all-to-all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetEstimate {
    Class { class: usize },
    PerClass { map: Vec<usize> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectDiagnostics {
    pub mask: MaskDiagnostics,
    /// Loss gain achieved by the noise ascent on the optimization subset.
    pub noise_gain: f32,
    /// All-to-all only: the smallest per-class rate.
    pub min_class_rate: Option<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub backdoored: bool,
    pub mode: DetectionMode,
    pub target_estimate: TargetEstimate,
    pub concentration: f32,
    pub tau: f32,
    pub diagnostics: DetectDiagnostics,
    pub wall_clock_seconds: f64,
}

/// All-to-one concentration: the largest, over candidate targets `c`, fraction
/// of samples with true label other than `c` that are predicted as `c`.
pub fn concentration_all_to_one(
    preds: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<(f32, usize)> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Evaluation("prediction/label size mismatch".into()));
    }
    let mut best = (0.0f32, 0usize);
    for c in 0..num_classes {
        let mut hits = 0usize;
        let mut eligible = 0usize;
        for (&p, &l) in preds.iter().zip(labels) {
            if l == c {
                continue;
            }
            eligible += 1;
            if p == c {
                hits += 1;
            }
        }
        if eligible == 0 {
            continue;
        }
        let rate = hits as f32 / eligible as f32;
        if rate > best.0 {
            best = (rate, c);
        }
    }
    Ok(best)
}

/// All-to-all concentration: per-class rate of predicting `(y + 1) mod C`,
/// averaged over classes. Every class must appear in the scoring data.
pub fn concentration_all_to_all(
    preds: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<(f32, Vec<f32>, Vec<usize>)> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Evaluation("prediction/label size mismatch".into()));
    }
    let mut rates = Vec::with_capacity(num_classes);
    let mut map = Vec::with_capacity(num_classes);
    for y in 0..num_classes {
        let members: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == y).collect();
        if members.is_empty() {
            return Err(Error::Evaluation(format!(
                "class {y} has no samples in the scoring data"
            )));
        }
        let target = (y + 1) % num_classes;
        let hits = members.iter().filter(|&&i| preds[i] == target).count();
        rates.push(hits as f32 / members.len() as f32);
        // Empirical per-class argmax of predictions, as the estimate.
        let mut counts = vec![0usize; num_classes];
        for &i in &members {
            counts[preds[i]] += 1;
        }
        map.push(counts.iter().enumerate().max_by_key(|(_, &c)| c).map(|(k, _)| k).unwrap());
    }
    let mean = rates.iter().sum::<f32>() / rates.len() as f32;
    Ok((mean, rates, map))
}

/// Full detection pipeline on a frozen model: noise ascent and mask search on
/// the small optimization subset, scoring on the held-out validation batch.
/// The recorded wall clock covers exactly those three stages.
pub fn detect(
    model: &LayeredClassifier,
    opt_data: &Batch,
    val_data: &Batch,
    settings: &DetectionSettings,
) -> Result<DetectionVerdict> {
    if val_data.is_empty() {
        return Err(Error::Input("detection scoring set is empty".into()));
    }
    let start = Instant::now();
    let outcome = pgd_maximize(model, opt_data, &settings.pgd_config())?;
    let mask = optimize_mask(model, opt_data, &settings.mask_config())?;
    let logits = masked_noised_predict(model, &outcome.noise, &mask, &val_data.inputs)?;
    let preds = argmax_rows(&logits);
    let (concentration, target_estimate, min_class_rate) = match settings.mode {
        DetectionMode::AllToOne => {
            let (c, target) = concentration_all_to_one(&preds, &val_data.labels, model.num_classes)?;
            (c, TargetEstimate::Class { class: target }, None)
        }
        DetectionMode::AllToAll => {
            let (c, rates, map) =
                concentration_all_to_all(&preds, &val_data.labels, model.num_classes)?;
            let min = rates.iter().cloned().fold(f32::INFINITY, f32::min);
            (c, TargetEstimate::PerClass { map }, Some(min))
        }
    };
    let wall_clock_seconds = start.elapsed().as_secs_f64();
    let mask_diag = feature_loss_diagnostics(model, &mask, opt_data)?;
    Ok(DetectionVerdict {
        backdoored: concentration >= settings.tau,
        mode: settings.mode,
        target_estimate,
        concentration,
        tau: settings.tau,
        diagnostics: DetectDiagnostics {
            mask: mask_diag,
            noise_gain: outcome.gain(),
            min_class_rate,
        },
        wall_clock_seconds,
    })
}

/// Ground-truth labelled zoo entry for report aggregation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZooVerdict {
    pub model_id: String,
    pub attack: String,
    pub is_backdoored: bool,
    pub verdict: DetectionVerdict,
}

/// One report row per attack group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZooReportRow {
    pub attack: String,
    pub models: usize,
    pub flagged: usize,
    pub detection_accuracy: f32,
    pub mean_wall_clock_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZooReport {
    pub rows: Vec<ZooReportRow>,
    pub overall_accuracy: f32,
}

impl ZooReport {
    /// Aggregate per-model verdicts into per-attack rows. A verdict is correct
    /// when the flag matches the ground truth.
    pub fn from_verdicts(verdicts: &[ZooVerdict]) -> ZooReport {
        let mut order: Vec<String> = Vec::new();
        for v in verdicts {
            if !order.contains(&v.attack) {
                order.push(v.attack.clone());
            }
        }
        let mut rows = Vec::new();
        let mut correct_total = 0usize;
        for attack in order {
            let group: Vec<&ZooVerdict> =
                verdicts.iter().filter(|v| v.attack == attack).collect();
            let flagged = group.iter().filter(|v| v.verdict.backdoored).count();
            let correct = group
                .iter()
                .filter(|v| v.verdict.backdoored == v.is_backdoored)
                .count();
            correct_total += correct;
            let mean_wall = group
                .iter()
                .map(|v| v.verdict.wall_clock_seconds)
                .sum::<f64>()
                / group.len() as f64;
            rows.push(ZooReportRow {
                attack,
                models: group.len(),
                flagged,
                detection_accuracy: correct as f32 / group.len() as f32,
                mean_wall_clock_seconds: mean_wall,
            });
        }
        let overall = if verdicts.is_empty() {
            0.0
        } else {
            correct_total as f32 / verdicts.len() as f32
        };
        ZooReport { rows, overall_accuracy: overall }
    }

    /// CSV shaped like the detection table: attack, models, flagged, accuracy.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("attack,models,flagged,detection_accuracy,mean_seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.4},{:.2}\n",
                r.attack, r.models, r.flagged, r.detection_accuracy, r.mean_wall_clock_seconds
            ));
        }
        out.push_str(&format!("overall,,,{:.4},\n", self.overall_accuracy));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_predictions_concentrate_fully() {
        // Balanced labels, every prediction lands on class 3.
        let labels: Vec<usize> = (0..40).map(|i| i % 10).collect();
        let preds = vec![3usize; 40];
        let (c, target) = concentration_all_to_one(&preds, &labels, 10).unwrap();
        assert_eq!(target, 3);
        assert!((c - 1.0).abs() < 1e-6);
    }

    #[test]
    fn uniform_predictions_stay_near_class_prior() {
        // Histogram oracle: a synthetic prediction vector spreading uniformly
        // over ten classes concentrates at about one tenth.
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let preds: Vec<usize> = (0..100).map(|i| (i * 7 + 3) % 10).collect();
        let mut hist = vec![0usize; 10];
        for (&p, &l) in preds.iter().zip(&labels) {
            if p != l {
                hist[p] += 1;
            }
        }
        let oracle: f32 = hist
            .iter()
            .enumerate()
            .map(|(c, &h)| h as f32 / labels.iter().filter(|&&l| l != c).count() as f32)
            .fold(0.0, f32::max);
        let (c, _) = concentration_all_to_one(&preds, &labels, 10).unwrap();
        assert!((c - oracle).abs() < 1e-6);
        assert!(c < 0.25, "uniform predictions must not concentrate: {c}");
    }

    #[test]
    fn all_to_one_excludes_same_class_samples() {
        // A perfectly accurate model never counts toward its own classes.
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let preds = labels.clone();
        let (c, _) = concentration_all_to_one(&preds, &labels, 3).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn all_to_all_rates_and_errors() {
        let labels = vec![0, 0, 1, 1, 2, 2];
        // Class 0 -> 1 both times, class 1 -> 2 once, class 2 -> 0 never.
        let preds = vec![1, 1, 2, 0, 1, 1];
        let (c, rates, _) = concentration_all_to_all(&preds, &labels, 3).unwrap();
        assert_eq!(rates, vec![1.0, 0.5, 0.0]);
        assert!((c - 0.5).abs() < 1e-6);

        let missing = vec![0, 0, 1, 1, 1, 0];
        let err = concentration_all_to_all(&preds, &missing, 3).unwrap_err();
        match err {
            Error::Evaluation(msg) => assert!(msg.contains("class 2"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn report_aggregates_rows_and_accuracy() {
        let fake_verdict = |flagged: bool| DetectionVerdict {
            backdoored: flagged,
            mode: DetectionMode::AllToOne,
            target_estimate: TargetEstimate::Class { class: 0 },
            concentration: if flagged { 0.9 } else { 0.1 },
            tau: 0.5,
            diagnostics: DetectDiagnostics {
                mask: crate::decouple::MaskDiagnostics {
                    l1_norm: 0.0,
                    l1_fraction: 0.0,
                    pos_loss: 0.0,
                    neg_loss: 0.0,
                },
                noise_gain: 0.0,
                min_class_rate: None,
            },
            wall_clock_seconds: 1.0,
        };
        let verdicts = vec![
            ZooVerdict {
                model_id: "m0".into(),
                attack: "clean".into(),
                is_backdoored: false,
                verdict: fake_verdict(false),
            },
            ZooVerdict {
                model_id: "m1".into(),
                attack: "clean".into(),
                is_backdoored: false,
                verdict: fake_verdict(true),
            },
            ZooVerdict {
                model_id: "m2".into(),
                attack: "patch".into(),
                is_backdoored: true,
                verdict: fake_verdict(true),
            },
        ];
        let report = ZooReport::from_verdicts(&verdicts);
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].attack, "clean");
        assert_eq!(report.rows[0].flagged, 1);
        assert!((report.rows[0].detection_accuracy - 0.5).abs() < 1e-6);
        assert!((report.rows[1].detection_accuracy - 1.0).abs() < 1e-6);
        assert!((report.overall_accuracy - 2.0 / 3.0).abs() < 1e-6);
        let csv = report.to_csv();
        assert!(csv.contains("patch,1,1,1.0000"));
    }

    #[test]
    fn unreachable_tau_flags_nothing() {
        // Degenerate detector: tau above 1 never flags, so clean rows score
        // perfectly and attack rows score zero.
        let labels: Vec<usize> = (0..20).map(|i| i % 10).collect();
        let preds = vec![0usize; 20];
        let (c, _) = concentration_all_to_one(&preds, &labels, 10).unwrap();
        assert!(c <= 1.0 && c > 0.99);
        let tau = 1.01f32;
        assert!(c < tau, "concentration can never reach an unreachable tau");
    }

    #[test]
    fn threshold_monotonicity() {
        // Raising tau never converts a clean verdict to backdoored.
        let concentrations = [0.1f32, 0.49, 0.5, 0.73, 1.0];
        for &c in &concentrations {
            let low = c >= 0.4;
            let high = c >= 0.6;
            assert!(!(high && !low), "raising tau flipped clean to flagged");
        }
    }
}
