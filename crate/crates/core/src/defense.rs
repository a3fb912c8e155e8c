//! Backdoor removal: fine-tune on clean data while also minimizing the loss
//! of the noised model, so that the parameters move away from the backdoor
//! shortcut the noise activates. Plain fine-tuning is the ablation without
//! the noise term.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::attack::{asr, benign_accuracy, PoisonSpec};
use crate::error::{Error, Result};
use crate::model::layers::{Layer, LayerGrads};
use crate::model::network::softmax_xent;
use crate::model::{Batch, Grads, LayeredClassifier, ParamSelection};
use crate::noise::{pgd_maximize, NeuronNoise, PgdConfig, UpdateRule};
use crate::rng::{child_seed_indexed, shuffled_indices};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseRefresh {
    PerEpoch,
    PerStep,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub lambda2: f32,
    pub learning_rate: f32,
    pub epochs: usize,
    pub data_fraction: f32,
    pub epsilon: f32,
    pub noise_refresh: NoiseRefresh,
    pub seed: u64,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub pgd_steps: usize,
    pub selection: ParamSelection,
}

impl DefenseConfig {
    pub fn new(epsilon: f32, seed: u64) -> Self {
        DefenseConfig {
            lambda2: 0.5,
            learning_rate: 0.005,
            epochs: 25,
            data_fraction: 0.05,
            epsilon,
            noise_refresh: NoiseRefresh::PerEpoch,
            seed,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            pgd_steps: 30,
            selection: ParamSelection::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda2 < 0.0 {
            return Err(Error::Input("lambda2 must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.data_fraction) || self.data_fraction == 0.0 {
            return Err(Error::Input("data fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn pgd_config(&self, round: u64) -> PgdConfig {
        PgdConfig {
            epsilon: self.epsilon,
            steps: self.pgd_steps,
            step_size: None,
            selection: self.selection,
            update: UpdateRule::Signed,
            seed: child_seed_indexed(self.seed, "defense-noise", round),
        }
    }
}

/// Before/after metrics of a mitigation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseResult {
    pub ba_before: f32,
    pub asr_before: f32,
    pub ba_after: f32,
    pub asr_after: f32,
    pub epochs_run: usize,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub epochs_run: usize,
    pub noise_optimizations: usize,
    pub wall_clock_seconds: f64,
}

struct Momentum {
    velocity: Grads,
}

impl Momentum {
    fn step(
        &mut self,
        model: &mut LayeredClassifier,
        grads: &Grads,
        lr: f32,
        momentum: f32,
        weight_decay: f32,
    ) {
        let upd2 = |w: &mut Array2<f32>, g: &Array2<f32>, v: &mut Array2<f32>| {
            for ((w, &g), v) in w.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *v = momentum * *v + g + weight_decay * *w;
                *w -= lr * *v;
            }
        };
        let upd1 = |w: &mut Array1<f32>, g: &Array1<f32>, v: &mut Array1<f32>| {
            for ((w, &g), v) in w.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *v = momentum * *v + g + weight_decay * *w;
                *w -= lr * *v;
            }
        };
        for (i, layer) in model.layers.iter_mut().enumerate() {
            match (layer, &grads.per_layer[i], &mut self.velocity.per_layer[i]) {
                (
                    Layer::Conv2d(c),
                    LayerGrads::ConvOrAffine { dw, db },
                    LayerGrads::ConvOrAffine { dw: vw, db: vb },
                ) => {
                    upd2(&mut c.weight, dw, vw);
                    upd1(&mut c.bias, db, vb);
                }
                (
                    Layer::Affine(a),
                    LayerGrads::ConvOrAffine { dw, db },
                    LayerGrads::ConvOrAffine { dw: vw, db: vb },
                ) => {
                    upd2(&mut a.weight, dw, vw);
                    upd1(&mut a.bias, db, vb);
                }
                (
                    Layer::BatchNorm2d(b),
                    LayerGrads::BatchNorm { dgamma, dbeta },
                    LayerGrads::BatchNorm { dgamma: vg, dbeta: vb },
                ) => {
                    upd1(&mut b.gamma, dgamma, vg);
                    upd1(&mut b.beta, dbeta, vb);
                }
                _ => {}
            }
        }
    }
}

/// Fine-tune in place, minimizing `CE(f(x), y) + lambda2 * CE(f_noised(x), y)`.
/// The noise is re-optimized against the current parameters at the configured
/// cadence. With `lambda2 == 0` the noise branch is skipped entirely (no RNG
/// is consumed), which makes the trajectory identical to plain fine-tuning.
pub fn noise_finetune(
    model: &mut LayeredClassifier,
    clean: &Batch,
    cfg: &DefenseConfig,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if clean.is_empty() {
        return Err(Error::Input("fine-tuning needs clean samples".into()));
    }
    let started = Instant::now();
    let use_noise = cfg.lambda2 > 0.0;
    let mut momentum = Momentum { velocity: Grads::zeros_like(model) };
    let mut noise: Option<NeuronNoise> = None;
    let mut noise_rounds = 0u64;
    let n = clean.len();

    for epoch in 0..cfg.epochs {
        if use_noise && cfg.noise_refresh == NoiseRefresh::PerEpoch {
            let outcome = pgd_maximize(model, clean, &cfg.pgd_config(noise_rounds)).map_err(
                |e| Error::Training { epoch, msg: format!("noise refresh failed: {e}") },
            )?;
            noise = Some(outcome.noise);
            noise_rounds += 1;
        }
        let order =
            shuffled_indices(n, child_seed_indexed(cfg.seed, "defense-shuffle", epoch as u64));
        let mut start = 0;
        while start < n {
            let end = (start + cfg.batch_size).min(n);
            let batch = clean.select(&order[start..end]);
            if use_noise && cfg.noise_refresh == NoiseRefresh::PerStep {
                let outcome = pgd_maximize(model, clean, &cfg.pgd_config(noise_rounds)).map_err(
                    |e| Error::Training { epoch, msg: format!("noise refresh failed: {e}") },
                )?;
                noise = Some(outcome.noise);
                noise_rounds += 1;
            }

            // Clean branch, training-mode normalization.
            let (logits, tape) = model.forward_cached(&batch.inputs, true)?;
            let (loss, dlogits) = softmax_xent(&logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Training { epoch, msg: "defense loss diverged".into() });
            }
            let (mut grads, _) = model.backward(&tape, dlogits, false)?;
            model.apply_bn_updates(&tape);

            // Noised branch: gradients flow to the stored parameters through
            // the per-neuron scaling. Running statistics are not updated here.
            if use_noise {
                let nz = noise.as_ref().expect("noise initialized at refresh");
                let noised = model.with_neuron_noise(&nz.selection, &nz.delta, &nz.xi)?;
                let (nl, ngrads) = noised.loss_and_grads(&batch)?;
                if !nl.is_finite() {
                    return Err(Error::Training { epoch, msg: "noised loss diverged".into() });
                }
                let base =
                    model.base_grads_from_noised(&nz.selection, &nz.delta, &nz.xi, ngrads);
                grads.accumulate(&base, cfg.lambda2);
            }
            momentum.step(model, &grads, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
            start = end;
        }
    }
    Ok(FinetuneReport {
        epochs_run: cfg.epochs,
        noise_optimizations: noise_rounds as usize,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Standard fine-tuning under the same optimizer settings, no noise term.
pub fn plain_finetune(
    model: &mut LayeredClassifier,
    clean: &Batch,
    cfg: &DefenseConfig,
) -> Result<FinetuneReport> {
    noise_finetune(model, clean, &DefenseConfig { lambda2: 0.0, ..cfg.clone() })
}

/// Fill in before/after benign accuracy and attack success rate.
pub fn evaluate_defense(
    before: &LayeredClassifier,
    after: &LayeredClassifier,
    test: &Batch,
    spec: &PoisonSpec,
    epochs_run: usize,
    wall_clock_seconds: f64,
) -> Result<DefenseResult> {
    Ok(DefenseResult {
        ba_before: benign_accuracy(before, test)?,
        asr_before: asr(before, test, spec)?,
        ba_after: benign_accuracy(after, test)?,
        asr_after: asr(after, test, spec)?,
        epochs_run,
        wall_clock_seconds,
    })
}
