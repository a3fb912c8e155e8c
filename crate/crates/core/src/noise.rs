//! Adversarial neuron noise: multiplicative per-neuron perturbations bounded
//! in an l-infinity ball, optimized by projected gradient ascent to increase
//! the cross-entropy loss on clean data.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::network::softmax_xent;
use crate::model::{Batch, Grads, LayeredClassifier, ParamSelection};
use crate::rng::{child_seed, rng_from_seed};

/// Per-neuron multiplicative perturbations: `delta` scales weight vectors,
/// `xi` scales biases, both clamped to `[-epsilon, epsilon]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeuronNoise {
    pub delta: Vec<f32>,
    pub xi: Vec<f32>,
    pub epsilon: f32,
    pub selection: ParamSelection,
    pub seed: u64,
}

impl NeuronNoise {
    pub fn zeros(model: &LayeredClassifier, epsilon: f32, selection: ParamSelection) -> Self {
        let total: usize = model.noise_units(&selection).iter().map(|(_, u)| u).sum();
        NeuronNoise { delta: vec![0.0; total], xi: vec![0.0; total], epsilon, selection, seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    /// Largest entry magnitude across both vectors.
    pub fn linf(&self) -> f32 {
        self.delta
            .iter()
            .chain(self.xi.iter())
            .fold(0.0f32, |acc, &v| acc.max(v.abs()))
    }

    pub fn project(&mut self) {
        let e = self.epsilon;
        for v in self.delta.iter_mut().chain(self.xi.iter_mut()) {
            *v = v.clamp(-e, e);
        }
    }

    /// Scale every entry, keeping the ball radius fixed. Used for plotting
    /// accuracy at intermediate noise levels.
    pub fn scaled(&self, factor: f32) -> NeuronNoise {
        let mut out = self.clone();
        for v in out.delta.iter_mut().chain(out.xi.iter_mut()) {
            *v *= factor;
        }
        out
    }
}

/// How the ascent step uses the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// `delta += step * sign(grad)`: 30 steps of `epsilon/30` span the ball.
    Signed,
    /// `delta += step * grad`, for sensitivity studies.
    RawGradient,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PgdConfig {
    pub epsilon: f32,
    pub steps: usize,
    /// Defaults to `epsilon / steps` when absent.
    pub step_size: Option<f32>,
    pub selection: ParamSelection,
    pub update: UpdateRule,
    pub seed: u64,
}

impl PgdConfig {
    pub fn new(epsilon: f32, seed: u64) -> Self {
        PgdConfig {
            epsilon,
            steps: 30,
            step_size: None,
            selection: ParamSelection::default(),
            update: UpdateRule::Signed,
            seed,
        }
    }

    pub fn effective_step(&self) -> f32 {
        self.step_size.unwrap_or(self.epsilon / self.steps.max(1) as f32)
    }
}

/// Random start: entries i.i.d. uniform on `[-epsilon, epsilon]`, delta drawn
/// before xi.
pub fn init_noise(
    model: &LayeredClassifier,
    epsilon: f32,
    selection: ParamSelection,
    seed: u64,
) -> NeuronNoise {
    let total: usize = model.noise_units(&selection).iter().map(|(_, u)| u).sum();
    let mut noise =
        NeuronNoise { delta: vec![0.0; total], xi: vec![0.0; total], epsilon, selection, seed };
    if epsilon > 0.0 {
        let mut rng = rng_from_seed(seed);
        for v in noise.delta.iter_mut() {
            *v = rng.random_range(-epsilon..epsilon);
        }
        for v in noise.xi.iter_mut() {
            *v = rng.random_range(-epsilon..epsilon);
        }
    }
    noise
}

const CHUNK: usize = 512;

/// Mean cross-entropy of the noised model over `data`.
pub fn noise_loss(model: &LayeredClassifier, noise: &NeuronNoise, data: &Batch) -> Result<f32> {
    let noised = model.with_neuron_noise(&noise.selection, &noise.delta, &noise.xi)?;
    let n = data.len();
    if n == 0 {
        return Err(Error::Input("noise loss of an empty dataset".into()));
    }
    let mut total = 0f64;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let sub = data.select(&idx);
        let logits = noised.forward(&sub.inputs)?;
        let (loss, _) = softmax_xent(&logits, &sub.labels)?;
        total += loss as f64 * sub.len() as f64;
        start = end;
    }
    Ok((total / n as f64) as f32)
}

/// Loss and noise gradients over the full batch, accumulating over chunks so
/// one update sees the whole subset.
fn noise_loss_and_grads(
    model: &LayeredClassifier,
    noise: &NeuronNoise,
    data: &Batch,
) -> Result<(f32, Vec<f32>, Vec<f32>)> {
    let noised = model.with_neuron_noise(&noise.selection, &noise.delta, &noise.xi)?;
    let n = data.len();
    let mut total_loss = 0f64;
    let mut g_delta = vec![0.0f32; noise.len()];
    let mut g_xi = vec![0.0f32; noise.len()];
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let sub = data.select(&idx);
        let weight = sub.len() as f32 / n as f32;
        let (loss, grads): (f32, Grads) = noised.loss_and_grads(&sub)?;
        let (gd, gx) = model.noise_grads(&noise.selection, &grads);
        total_loss += loss as f64 * weight as f64;
        for (acc, g) in g_delta.iter_mut().zip(gd) {
            *acc += weight * g;
        }
        for (acc, g) in g_xi.iter_mut().zip(gx) {
            *acc += weight * g;
        }
        start = end;
    }
    Ok((total_loss as f32, g_delta, g_xi))
}

fn pgd_run(
    model: &LayeredClassifier,
    data: &Batch,
    cfg: &PgdConfig,
    seed: u64,
) -> Result<(NeuronNoise, f32, f32)> {
    let mut noise = init_noise(model, cfg.epsilon, cfg.selection, seed);
    let start_loss = noise_loss(model, &noise, data)?;
    let step = cfg.effective_step();
    for step_idx in 0..cfg.steps {
        let (loss, g_delta, g_xi) = noise_loss_and_grads(model, &noise, data)?;
        if !loss.is_finite() || g_delta.iter().chain(g_xi.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Optimization {
                step: step_idx,
                msg: "non-finite loss or gradient during noise ascent".into(),
            });
        }
        match cfg.update {
            UpdateRule::Signed => {
                for (v, g) in noise.delta.iter_mut().zip(&g_delta) {
                    *v += step * g.signum();
                }
                for (v, g) in noise.xi.iter_mut().zip(&g_xi) {
                    *v += step * g.signum();
                }
            }
            UpdateRule::RawGradient => {
                for (v, g) in noise.delta.iter_mut().zip(&g_delta) {
                    *v += step * g;
                }
                for (v, g) in noise.xi.iter_mut().zip(&g_xi) {
                    *v += step * g;
                }
            }
        }
        noise.project();
    }
    let final_loss = noise_loss(model, &noise, data)?;
    Ok((noise, start_loss, final_loss))
}

/// Outcome of the ascent, with the objective at the random start and at the end.
#[derive(Debug, Clone)]
pub struct PgdOutcome {
    pub noise: NeuronNoise,
    pub start_loss: f32,
    pub final_loss: f32,
}

impl PgdOutcome {
    /// Loss gain over the run, the detection diagnostic.
    pub fn gain(&self) -> f32 {
        self.final_loss - self.start_loss
    }
}

/// Maximize the clean-data loss over the noise ball. The model is frozen.
/// The final objective must not fall below the starting one; on violation the
/// ascent retries once with a derived seed before failing.
pub fn pgd_maximize(model: &LayeredClassifier, data: &Batch, cfg: &PgdConfig) -> Result<PgdOutcome> {
    if data.is_empty() {
        return Err(Error::Input("noise ascent needs a non-empty clean subset".into()));
    }
    if cfg.epsilon <= 0.0 {
        return Err(Error::Input("epsilon must be positive".into()));
    }
    let (noise, start_loss, final_loss) = pgd_run(model, data, cfg, cfg.seed)?;
    if cfg.steps == 0 || final_loss >= start_loss {
        return Ok(PgdOutcome { noise, start_loss, final_loss });
    }
    let retry_seed = child_seed(cfg.seed, "pgd-retry");
    let (noise, start_loss, final_loss) = pgd_run(model, data, cfg, retry_seed)?;
    if final_loss >= start_loss {
        return Ok(PgdOutcome { noise, start_loss, final_loss });
    }
    Err(Error::Optimization {
        step: cfg.steps,
        msg: format!("ascent lost ground twice: {start_loss} -> {final_loss}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchDescriptor};
    use crate::testutil::{finite_diff, vec_batch};
    use ndarray::{arr1, arr2};

    fn small_model() -> LayeredClassifier {
        build_model(&ArchDescriptor::default_mlp(), (2, 1, 1), 2, 3).unwrap()
    }

    #[test]
    fn epsilon_zero_gives_zero_noise() {
        let model = small_model();
        let noise = init_noise(&model, 0.0, ParamSelection::default(), 5);
        assert!(noise.delta.iter().all(|&v| v == 0.0));
        assert!(noise.xi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_noise() {
        let model = small_model();
        let a = init_noise(&model, 0.3, ParamSelection::default(), 5);
        let b = init_noise(&model, 0.3, ParamSelection::default(), 5);
        assert_eq!(a.delta, b.delta);
        assert_eq!(a.xi, b.xi);
        let c = init_noise(&model, 0.3, ParamSelection::default(), 6);
        assert_ne!(a.delta, c.delta);
    }

    #[test]
    fn init_noise_mean_matches_uniform_moments() {
        // 10k draws: the empirical mean must sit within 3 standard errors of 0.
        let arch = ArchDescriptor::Mlp { hidden: vec![5000 - 2], activation: crate::model::ActKind::Relu };
        let model = build_model(&arch, (2, 1, 1), 2, 0).unwrap();
        let eps = 0.3f32;
        let noise = init_noise(&model, eps, ParamSelection::default(), 42);
        let n = (noise.delta.len() + noise.xi.len()) as f64;
        assert!(n >= 10_000.0, "wanted at least 10k draws, got {n}");
        let mean: f64 = noise
            .delta
            .iter()
            .chain(noise.xi.iter())
            .map(|&v| v as f64)
            .sum::<f64>()
            / n;
        let se = eps as f64 / (3.0f64 * n).sqrt();
        assert!(mean.abs() <= 3.0 * se, "mean {mean} exceeds 3 SE {se}");
        assert!(noise.linf() <= eps);
    }

    #[test]
    fn zero_noise_loss_equals_clean_loss() {
        let model = small_model();
        let data = vec_batch(&[vec![0.2, 0.8], vec![0.9, 0.1]], vec![0, 1], 2);
        let noise = NeuronNoise::zeros(&model, 0.3, ParamSelection::default());
        let clean = crate::model::dataset_loss(&model, &data).unwrap();
        let noised = noise_loss(&model, &noise, &data).unwrap();
        assert!((clean - noised).abs() < 1e-6);
    }

    #[test]
    fn hand_model_noise_loss_matches_hand_computation() {
        // Single affine neuron pair; noise on the head only.
        let model = crate::testutil::affine_only(arr2(&[[1.0, 0.0], [0.0, 1.0]]), arr1(&[0.0, 0.0]));
        let data = vec_batch(&[vec![2.0, 5.0]], vec![0], 2);
        let mut noise = NeuronNoise::zeros(&model, 0.5, ParamSelection::default());
        noise.delta[0] = 0.3; // logits become [2.6, 5.0]
        let loss = noise_loss(&model, &noise, &data).unwrap();
        let expect = ((5.0f64 - 2.6).exp() + 1.0).ln() as f32; // softmax gap
        assert!((loss - expect).abs() < 1e-5, "{loss} vs {expect}");
    }

    #[test]
    fn noise_gradients_match_finite_differences() {
        let arch = ArchDescriptor::Mlp { hidden: vec![4], activation: crate::model::ActKind::LeakyRelu };
        let model = build_model(&arch, (2, 1, 1), 3, 17).unwrap();
        let data = vec_batch(
            &[vec![0.9, -0.3], vec![-0.4, 0.8], vec![0.3, 0.2]],
            vec![0, 1, 2],
            3,
        );
        let sel = ParamSelection::default();
        let base = init_noise(&model, 0.2, sel, 3);
        let (_, g_delta, g_xi) = noise_loss_and_grads(&model, &base, &data).unwrap();

        let fd_delta = finite_diff(&base.delta, 1e-3, |d| {
            let mut n = base.clone();
            n.delta = d.to_vec();
            noise_loss(&model, &n, &data).unwrap()
        });
        let fd_xi = finite_diff(&base.xi, 1e-3, |x| {
            let mut n = base.clone();
            n.xi = x.to_vec();
            noise_loss(&model, &n, &data).unwrap()
        });
        let rel_d = crate::testutil::grad_rel_err(&g_delta, &fd_delta);
        let rel_x = crate::testutil::grad_rel_err(&g_xi, &fd_xi);
        assert!(rel_d <= 1e-3, "delta grad rel err {rel_d}");
        assert!(rel_x <= 1e-3, "xi grad rel err {rel_x}");
    }

    #[test]
    fn zero_steps_returns_random_start() {
        let model = small_model();
        let data = vec_batch(&[vec![0.2, 0.8], vec![0.9, 0.1]], vec![0, 1], 2);
        let cfg = PgdConfig { steps: 0, ..PgdConfig::new(0.3, 9) };
        let out = pgd_maximize(&model, &data, &cfg).unwrap();
        let start = init_noise(&model, 0.3, ParamSelection::default(), 9);
        assert_eq!(out.noise.delta, start.delta);
        assert_eq!(out.noise.xi, start.xi);
    }

    #[test]
    fn one_step_moves_along_gradient_sign() {
        // First ascent step from the random start follows sign(grad), with the
        // gradient verified by finite differences at that start.
        let model = crate::testutil::affine_only(arr2(&[[0.8, 0.0], [0.0, 1.2]]), arr1(&[0.05, -0.05]));
        let data = vec_batch(&[vec![1.0, 0.4], vec![0.3, 1.1]], vec![0, 1], 2);
        let cfg = PgdConfig { steps: 1, ..PgdConfig::new(0.25, 4) };
        let start = init_noise(&model, 0.25, cfg.selection, 4);
        let fd = finite_diff(&start.delta, 1e-3, |d| {
            let mut n = start.clone();
            n.delta = d.to_vec();
            noise_loss(&model, &n, &data).unwrap()
        });
        let out = pgd_maximize(&model, &data, &cfg).unwrap();
        let step = cfg.effective_step();
        for ((after, before), g) in out.noise.delta.iter().zip(&start.delta).zip(&fd) {
            if g.abs() > 1e-5 {
                let moved = after - before;
                let expect = step * g.signum();
                assert!(
                    (moved - expect).abs() < 1e-4 || (after.abs() - 0.25).abs() < 1e-6,
                    "step moved {moved}, expected {expect}"
                );
            }
        }
    }

    #[test]
    fn pgd_respects_ball_and_monotone_gain() {
        let model = small_model();
        let data = vec_batch(
            &[vec![0.2, 0.8], vec![0.9, 0.1], vec![0.5, 0.4], vec![0.1, 0.6]],
            vec![0, 1, 0, 1],
            2,
        );
        let cfg = PgdConfig::new(0.3, 21);
        let out = pgd_maximize(&model, &data, &cfg).unwrap();
        assert!(out.noise.linf() <= 0.3 + 1e-6);
        assert!(out.final_loss >= out.start_loss, "ascent must not lose ground");
        // And it should beat the zero-noise loss on this toy problem.
        let zero = NeuronNoise::zeros(&model, 0.3, ParamSelection::default());
        let zero_loss = noise_loss(&model, &zero, &data).unwrap();
        assert!(out.final_loss >= zero_loss);
    }

    #[test]
    fn pgd_is_deterministic() {
        let model = small_model();
        let data = vec_batch(&[vec![0.2, 0.8], vec![0.9, 0.1]], vec![0, 1], 2);
        let cfg = PgdConfig::new(0.3, 33);
        let a = pgd_maximize(&model, &data, &cfg).unwrap();
        let b = pgd_maximize(&model, &data, &cfg).unwrap();
        assert_eq!(
            a.noise.delta.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.noise.delta.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
