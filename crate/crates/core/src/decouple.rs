//! Feature-space mask decoupling: optimize a mask over the latent feature so
//! the masked features classify well while the complement classifies badly,
//! under an L1 size penalty. The unregularized variant is kept as a baseline
//! that degenerates to a dense mask.

use ndarray::{Array1, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::network::softmax_xent;
use crate::model::{Batch, LayeredClassifier};
use crate::noise::NeuronNoise;
use crate::rng::{child_seed_indexed, shuffled_indices};

/// Per-element mask over the latent feature, entries in `[0, 1]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMask {
    pub m: Vec<f32>,
    pub lambda1: f32,
}

impl FeatureMask {
    pub fn l1_norm(&self) -> f32 {
        self.m.iter().sum()
    }

    pub fn l1_fraction(&self) -> f32 {
        self.l1_norm() / self.m.len() as f32
    }

    pub fn as_array(&self) -> Array1<f32> {
        Array1::from_vec(self.m.clone())
    }

    /// The complement `1 - m`.
    pub fn negative(&self) -> Array1<f32> {
        Array1::from_vec(self.m.iter().map(|&v| 1.0 - v).collect())
    }
}

/// Mask quality measurements mirroring the positive/negative feature losses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskDiagnostics {
    pub l1_norm: f32,
    pub l1_fraction: f32,
    pub pos_loss: f32,
    pub neg_loss: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskConfig {
    pub lambda1: f32,
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { lambda1: 0.75, epochs: 20, learning_rate: 0.01, batch_size: 16, seed: 0 }
    }
}

/// Latent features of the whole batch, evaluated in chunks on the frozen model.
pub fn latent_features(model: &LayeredClassifier, data: &Batch) -> Result<Array2<f32>> {
    let n = data.len();
    let d = model.latent_len();
    let mut features = Array2::zeros((n, d));
    let chunk = 256;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let sub = data.select(&idx);
        let (f, _) = model.forward_split(&sub.inputs)?;
        features.slice_mut(ndarray::s![start..end, ..]).assign(&f);
        start = end;
    }
    Ok(features)
}

fn head_weight(model: &LayeredClassifier) -> Result<Array2<f32>> {
    match &model.layers[model.split_index] {
        crate::model::Layer::Affine(a) => Ok(a.weight.clone()),
        _ => Err(Error::Config("head is not affine".into())),
    }
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
    lr: f32,
}

impl Adam {
    fn new(len: usize, lr: f32) -> Self {
        Adam { m: vec![0.0; len], v: vec![0.0; len], t: 0, lr }
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
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= self.lr * mh / (vh.sqrt() + EPS);
        }
    }
}

/// Minimize `CE(head(z*m), y) - CE(head(z*(1-m)), y) + lambda1 * mean(m)` over
/// the mask. The mask starts at 0.5 everywhere and is clamped to `[0, 1]`
/// after every step. The penalty uses the mean of the entries so it shares the
/// cross-entropy scale regardless of latent width.
pub fn optimize_mask(model: &LayeredClassifier, data: &Batch, cfg: &MaskConfig) -> Result<FeatureMask> {
    if data.is_empty() {
        return Err(Error::Input("mask optimization needs a non-empty clean subset".into()));
    }
    if cfg.lambda1 < 0.0 {
        return Err(Error::Input("lambda1 must be non-negative".into()));
    }
    let features = latent_features(model, data)?;
    let w = head_weight(model)?;
    let d = model.latent_len();
    let n = data.len();
    let mut mask = vec![0.5f32; d];
    let mut adam = Adam::new(d, cfg.learning_rate);
    let penalty_grad = cfg.lambda1 / d as f32;

    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(n, child_seed_indexed(cfg.seed, "mask-shuffle", epoch as u64));
        let mut start = 0;
        while start < n {
            let end = (start + cfg.batch_size).min(n);
            let idx = &order[start..end];
            let z = features.select(Axis(0), idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let m_arr = Array1::from_vec(mask.clone());
            let neg_arr = m_arr.mapv(|v| 1.0 - v);

            let pos_logits = model.masked_head(&z, &m_arr)?;
            let (pos_loss, g_pos) = softmax_xent(&pos_logits, &labels)?;
            let neg_logits = model.masked_head(&z, &neg_arr)?;
            let (neg_loss, g_neg) = softmax_xent(&neg_logits, &labels)?;
            if !pos_loss.is_finite() || !neg_loss.is_finite() {
                return Err(Error::Optimization {
                    step: epoch,
                    msg: "non-finite mask objective".into(),
                });
            }

            // d/dm [CE_pos - CE_neg]: both branches contribute with the same
            // sign once the complement's inner derivative is applied.
            let gp = g_pos.dot(&w); // N x D
            let gn = g_neg.dot(&w);
            let mut grad = vec![penalty_grad; d];
            for (row_z, (row_p, row_n)) in
                z.axis_iter(Axis(0)).zip(gp.axis_iter(Axis(0)).zip(gn.axis_iter(Axis(0))))
            {
                for (k, ((zv, pv), nv)) in row_z.iter().zip(row_p.iter()).zip(row_n.iter()).enumerate()
                {
                    grad[k] += zv * (pv + nv);
                }
            }
            adam.step(&mut mask, &grad);
            for v in mask.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
            start = end;
        }
    }
    Ok(FeatureMask { m: mask, lambda1: cfg.lambda1 })
}

/// The unregularized baseline: identical to [`optimize_mask`] with the penalty
/// forced to zero. Kept as the diagnostic showing the dense-mask failure.
pub fn btidbf_mask(model: &LayeredClassifier, data: &Batch, cfg: &MaskConfig) -> Result<FeatureMask> {
    optimize_mask(model, data, &MaskConfig { lambda1: 0.0, ..cfg.clone() })
}

/// Logits of `head(g_noised(x) * (1 - m))`: noise applied throughout the
/// network (head included, per the default selection), negative mask applied
/// on the latent feature.
pub fn masked_noised_predict(
    model: &LayeredClassifier,
    noise: &NeuronNoise,
    mask: &FeatureMask,
    x: &Array4<f32>,
) -> Result<Array2<f32>> {
    if mask.m.len() != model.latent_len() {
        return Err(Error::Config(format!(
            "mask has {} entries, latent is {}",
            mask.m.len(),
            model.latent_len()
        )));
    }
    let noised = model.with_neuron_noise(&noise.selection, &noise.delta, &noise.xi)?;
    let (features, _) = noised.forward_split(x)?;
    noised.masked_head(&features, &mask.negative())
}

/// Positive/negative feature losses and mask size, without any noise.
pub fn feature_loss_diagnostics(
    model: &LayeredClassifier,
    mask: &FeatureMask,
    data: &Batch,
) -> Result<MaskDiagnostics> {
    let features = latent_features(model, data)?;
    let pos_logits = model.masked_head(&features, &mask.as_array())?;
    let (pos_loss, _) = softmax_xent(&pos_logits, &data.labels)?;
    let neg_logits = model.masked_head(&features, &mask.negative())?;
    let (neg_loss, _) = softmax_xent(&neg_logits, &data.labels)?;
    Ok(MaskDiagnostics {
        l1_norm: mask.l1_norm(),
        l1_fraction: mask.l1_fraction(),
        pos_loss,
        neg_loss,
    })
}

/// One row of the lambda sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda1: f32,
    pub l1_norm: f32,
    pub l1_fraction: f32,
    pub pos_loss: f32,
    pub neg_loss: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lambda1Selection {
    pub lambda1: f32,
    /// Whether the sweep found a collapse; without one the grid maximum is
    /// returned and this flag marks the warning.
    pub collapsed: bool,
    pub rows: Vec<SweepRow>,
}

impl Lambda1Selection {
    /// CSV rows shaped like the sweep table: attack, lambda1, norm, losses.
    pub fn to_csv(&self, attack: &str) -> String {
        let mut out = String::from("attack,lambda1,l1_norm,pos_loss,neg_loss\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{attack},{:.2},{:.2},{:.4},{:.4}\n",
                row.lambda1, row.l1_norm, row.pos_loss, row.neg_loss
            ));
        }
        out
    }
}

/// Sweep the grid, rerunning the mask search per point under the same seed,
/// and pick a lambda just past the collapse knee: the midpoint of the first
/// grid interval where the mask fraction drops below one half.
pub fn select_lambda1(
    model: &LayeredClassifier,
    data: &Batch,
    grid: &[f32],
    cfg: &MaskConfig,
) -> Result<Lambda1Selection> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input("lambda grid must be ascending and non-empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &lambda1 in grid {
        let mask = optimize_mask(model, data, &MaskConfig { lambda1, ..cfg.clone() })?;
        let diag = feature_loss_diagnostics(model, &mask, data)?;
        rows.push(SweepRow {
            lambda1,
            l1_norm: diag.l1_norm,
            l1_fraction: diag.l1_fraction,
            pos_loss: diag.pos_loss,
            neg_loss: diag.neg_loss,
        });
    }
    // A knee is a crossing from a dense mask to a sparse one; a mask that was
    // never dense (degenerate objectives) yields the grid maximum plus the
    // warning flag instead.
    let collapse = (1..rows.len())
        .find(|&i| rows[i - 1].l1_fraction > 0.5 && rows[i].l1_fraction < 0.5);
    let (lambda1, collapsed) = match collapse {
        Some(i) => ((grid[i - 1] + grid[i]) / 2.0, true),
        None => (*grid.last().unwrap(), false),
    };
    Ok(Lambda1Selection { lambda1, collapsed, rows })
}

/// Default sweep grid: 0.0, 0.1, ..., 0.9.
pub fn default_lambda_grid() -> Vec<f32> {
    (0..10).map(|i| i as f32 * 0.1).collect()
}
