//! Input-space trigger inversion baseline: recover a minimal mask and pattern
//! that steer the model toward each candidate target class, then flag targets
//! whose recovered mask is an anomalously small outlier under a median
//! absolute deviation test.

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::network::softmax_xent;
use crate::model::{argmax_rows, Batch, LayeredClassifier};
use crate::rng::{child_seed, child_seed_indexed, shuffled_indices};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NcConfig {
    /// Weight of the mask-size penalty (mean of the mask entries).
    pub lambda: f32,
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Anomaly index above which a small-mask class is flagged.
    pub anomaly_threshold: f32,
}

impl Default for NcConfig {
    fn default() -> Self {
        NcConfig {
            lambda: 0.5,
            epochs: 100,
            learning_rate: 0.01,
            batch_size: 16,
            seed: 0,
            anomaly_threshold: 2.0,
        }
    }
}

/// Result of inverting one target class.
#[derive(Debug, Clone)]
pub struct NcInversion {
    /// Blend mask over the image plane, broadcast across channels.
    pub mask: Array2<f32>,
    pub pattern: Array3<f32>,
    pub inverted_asr: f32,
    pub mask_l1: f32,
}

struct AdamVec {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
    lr: f32,
}

impl AdamVec {
    fn new(len: usize, lr: f32) -> Self {
        AdamVec { m: vec![0.0; len], v: vec![0.0; len], t: 0, lr }
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        const EPS: f32 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t);
        let bc2 = 1.0 - B2.powi(self.t);
        for ((p, &g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + EPS);
        }
    }
}

fn blend(x: &Array4<f32>, mask: &Array2<f32>, pattern: &Array3<f32>) -> Array4<f32> {
    let mut out = x.clone();
    let (n, c, h, w) =
        (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let m = mask[[i, j]];
                    out[[ni, ci, i, j]] =
                        (1.0 - m) * x[[ni, ci, i, j]] + m * pattern[[ci, i, j]];
                }
            }
        }
    }
    out
}

/// Recover a trigger steering every input toward `target`: minimize
/// `CE(f((1-m)*x + m*t), target) + lambda * mean(m)` over the mask and
/// pattern, both clamped to `[0, 1]`.
pub fn nc_invert(
    model: &LayeredClassifier,
    data: &Batch,
    target: usize,
    cfg: &NcConfig,
) -> Result<NcInversion> {
    if target >= model.num_classes {
        return Err(Error::Input(format!("target {target} out of range")));
    }
    if data.is_empty() {
        return Err(Error::Input("trigger inversion needs clean samples".into()));
    }
    let (c, h, w) = model.input_shape;
    let hw = h * w;
    let mut mask = vec![0.1f32; hw];
    let mut pattern = vec![0.5f32; c * hw];
    let mut adam_m = AdamVec::new(hw, cfg.learning_rate);
    let mut adam_p = AdamVec::new(c * hw, cfg.learning_rate);
    let n = data.len();
    let penalty_grad = cfg.lambda / hw as f32;

    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(
            n,
            child_seed_indexed(child_seed(cfg.seed, "nc-shuffle"), "epoch", epoch as u64),
        );
        let mut startpos = 0;
        while startpos < n {
            let end = (startpos + cfg.batch_size).min(n);
            let batch = data.select(&order[startpos..end]);
            let bs = batch.len();
            let mask_arr = Array2::from_shape_vec((h, w), mask.clone()).unwrap();
            let pattern_arr = Array3::from_shape_vec((c, h, w), pattern.clone()).unwrap();
            let blended = blend(&batch.inputs, &mask_arr, &pattern_arr);
            let (logits, tape) = model.forward_cached(&blended, false)?;
            let targets = vec![target; bs];
            let (loss, dlogits) = softmax_xent(&logits, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Optimization {
                    step: epoch,
                    msg: "trigger inversion diverged".into(),
                });
            }
            let (_, dx) = model.backward(&tape, dlogits, true)?;
            let dx = dx.expect("input gradient requested");

            // d/dm = sum_c dx * (t - x); d/dt = dx * m.
            let mut g_mask = vec![penalty_grad; hw];
            let mut g_pattern = vec![0.0f32; c * hw];
            for ni in 0..bs {
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let g = dx[[ni, ci, i, j]];
                            g_mask[i * w + j] +=
                                g * (pattern_arr[[ci, i, j]] - batch.inputs[[ni, ci, i, j]]);
                            g_pattern[ci * hw + i * w + j] += g * mask_arr[[i, j]];
                        }
                    }
                }
            }
            adam_m.step(&mut mask, &g_mask);
            adam_p.step(&mut pattern, &g_pattern);
            for v in mask.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
            for v in pattern.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
            startpos = end;
        }
    }

    let mask_arr = Array2::from_shape_vec((h, w), mask).unwrap();
    let pattern_arr = Array3::from_shape_vec((c, h, w), pattern).unwrap();
    // ASR of the recovered trigger on non-target samples.
    let eligible: Vec<usize> = (0..n).filter(|&i| data.labels[i] != target).collect();
    let inverted_asr = if eligible.is_empty() {
        0.0
    } else {
        let sub = data.select(&eligible);
        let blended = blend(&sub.inputs, &mask_arr, &pattern_arr);
        let preds = argmax_rows(&model.forward(&blended)?);
        preds.iter().filter(|&&p| p == target).count() as f32 / eligible.len() as f32
    };
    let mask_l1 = mask_arr.sum();
    Ok(NcInversion { mask: mask_arr, pattern: pattern_arr, inverted_asr, mask_l1 })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NcVerdict {
    pub backdoored: bool,
    pub mask_l1s: Vec<f32>,
    pub anomaly_indices: Vec<f32>,
    pub inverted_asrs: Vec<f32>,
    pub flagged_classes: Vec<usize>,
    pub wall_clock_seconds: f64,
}

fn median(values: &mut [f32]) -> f32 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Anomaly index per class: `|l1 - median| / (1.4826 * MAD)` with a floor on
/// the MAD. A class is flagged when its mask is on the small side of the
/// median and its index exceeds the threshold.
pub fn mad_anomaly_indices(mask_l1s: &[f32], threshold: f32) -> (Vec<f32>, Vec<usize>) {
    let mut sorted = mask_l1s.to_vec();
    let med = median(&mut sorted);
    let mut devs: Vec<f32> = mask_l1s.iter().map(|&v| (v - med).abs()).collect();
    let mad = median(&mut devs).max(1e-9);
    let scale = 1.4826 * mad;
    let indices: Vec<f32> = mask_l1s.iter().map(|&v| (v - med).abs() / scale).collect();
    let flagged = indices
        .iter()
        .enumerate()
        .filter(|(c, &idx)| idx > threshold && mask_l1s[*c] < med)
        .map(|(c, _)| c)
        .collect();
    (indices, flagged)
}

/// Run inversion for every class and apply the MAD test.
pub fn nc_detect(model: &LayeredClassifier, data: &Batch, cfg: &NcConfig) -> Result<NcVerdict> {
    let start = std::time::Instant::now();
    let mut mask_l1s = Vec::with_capacity(model.num_classes);
    let mut inverted_asrs = Vec::with_capacity(model.num_classes);
    for target in 0..model.num_classes {
        let per_class = NcConfig { seed: child_seed_indexed(cfg.seed, "class", target as u64), ..cfg.clone() };
        let inv = nc_invert(model, data, target, &per_class)?;
        mask_l1s.push(inv.mask_l1);
        inverted_asrs.push(inv.inverted_asr);
    }
    let (anomaly_indices, flagged_classes) = mad_anomaly_indices(&mask_l1s, cfg.anomaly_threshold);
    Ok(NcVerdict {
        backdoored: !flagged_classes.is_empty(),
        mask_l1s,
        anomaly_indices,
        inverted_asrs,
        flagged_classes,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::affine_on_shape;
    use ndarray::{Array1, Array4};

    fn toy_images(n: usize, classes: usize) -> Batch {
        let inputs = Array4::from_shape_fn((n, 3, 6, 6), |(s, c, i, j)| {
            (((s * 29 + c * 13 + i * 5 + j) % 50) as f32) / 50.0
        });
        let labels = (0..n).map(|i| i % classes).collect();
        Batch::new(inputs, labels, classes).unwrap()
    }

    #[test]
    fn constant_target_model_needs_no_mask() {
        // Model already predicts class 1 everywhere: the penalty shrinks the
        // mask toward zero while the loss stays minimal.
        let mut bias = Array1::zeros(3);
        bias[1] = 8.0;
        let model = affine_on_shape(ndarray::Array2::zeros((3, 108)), bias, (3, 6, 6));
        let data = toy_images(12, 3);
        let cfg = NcConfig { epochs: 40, ..NcConfig::default() };
        let inv = nc_invert(&model, &data, 1, &cfg).unwrap();
        let hw = 36.0;
        assert!(
            inv.mask_l1 / hw < 0.02,
            "mask should collapse to nearly zero, fraction {}",
            inv.mask_l1 / hw
        );
        assert!((inv.inverted_asr - 1.0).abs() < 1e-6);
    }

    #[test]
    fn huge_penalty_collapses_mask_and_asr() {
        let model = affine_on_shape(
            ndarray::Array2::from_shape_fn((3, 108), |(o, i)| {
                ((o * 37 + i) % 11) as f32 / 11.0 - 0.45
            }),
            Array1::zeros(3),
            (3, 6, 6),
        );
        let data = toy_images(12, 3);
        let cfg = NcConfig { lambda: 1e6, epochs: 30, ..NcConfig::default() };
        let inv = nc_invert(&model, &data, 0, &cfg).unwrap();
        assert!(inv.mask_l1 < 1e-3, "penalty-dominated mask must vanish: {}", inv.mask_l1);
        // With no trigger left, the model's own prediction spread bounds ASR.
        let preds = argmax_rows(&model.forward(&data.inputs).unwrap());
        let prior =
            preds.iter().filter(|&&p| p == 0).count() as f32 / preds.len() as f32;
        assert!((inv.inverted_asr - prior).abs() <= 0.35);
    }

    #[test]
    fn mad_guard_handles_identical_masks() {
        let (indices, flagged) = mad_anomaly_indices(&[5.0; 8], 2.0);
        assert!(flagged.is_empty());
        assert!(indices.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mad_flags_small_outlier_only() {
        let l1s = [100.0, 98.0, 102.0, 101.0, 99.0, 100.5, 97.5, 3.0, 103.0, 100.2];
        let (indices, flagged) = mad_anomaly_indices(&l1s, 2.0);
        assert_eq!(flagged, vec![7]);
        assert!(indices[7] > 2.0);
        // A large outlier on the big side must not flag.
        let l1s_big = [100.0, 98.0, 102.0, 101.0, 99.0, 100.5, 97.5, 400.0, 103.0, 100.2];
        let (_, flagged_big) = mad_anomaly_indices(&l1s_big, 2.0);
        assert!(flagged_big.is_empty());
    }

    #[test]
    fn nc_invert_rejects_bad_target() {
        let model = affine_on_shape(ndarray::Array2::zeros((3, 108)), Array1::zeros(3), (3, 6, 6));
        let data = toy_images(6, 3);
        assert!(nc_invert(&model, &data, 7, &NcConfig::default()).is_err());
    }

    #[test]
    fn inversion_is_deterministic() {
        let model = affine_on_shape(
            ndarray::Array2::from_shape_fn((3, 108), |(o, i)| ((o + i) % 5) as f32 * 0.1 - 0.2),
            Array1::zeros(3),
            (3, 6, 6),
        );
        let data = toy_images(9, 3);
        let cfg = NcConfig { epochs: 5, seed: 11, ..NcConfig::default() };
        let a = nc_invert(&model, &data, 0, &cfg).unwrap();
        let b = nc_invert(&model, &data, 0, &cfg).unwrap();
        assert_eq!(
            a.mask.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.mask.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
