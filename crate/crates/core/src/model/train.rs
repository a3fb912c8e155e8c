//! Generic SGD training with momentum, weight decay and a step schedule.
//! Fully deterministic given the seed: batch order, shuffles and updates all
//! derive from it.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::layers::LayerGrads;
use super::network::{softmax_xent, Batch, Grads, LayeredClassifier};
use crate::error::{Error, Result};
use crate::rng::{child_seed_indexed, shuffled_indices};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs at which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f32,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 32,
            lr_milestones: vec![20, 26],
            lr_gamma: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f32,
    pub final_loss: f32,
    pub epochs_run: usize,
}

/// Momentum buffers, one per parameterized layer.
struct SgdState {
    velocity: Grads,
}

impl SgdState {
    fn new(model: &LayeredClassifier) -> Self {
        SgdState { velocity: Grads::zeros_like(model) }
    }

    /// v = momentum * v + (g + wd * w); w -= lr * v
    fn step(&mut self, model: &mut LayeredClassifier, grads: &Grads, hyper: &TrainHyper, lr: f32) {
        use super::layers::Layer;
        for (i, layer) in model.layers.iter_mut().enumerate() {
            let g = &grads.per_layer[i];
            let v = &mut self.velocity.per_layer[i];
            match (layer, g, v) {
                (
                    Layer::Conv2d(c),
                    LayerGrads::ConvOrAffine { dw, db },
                    LayerGrads::ConvOrAffine { dw: vw, db: vb },
                ) => {
                    sgd_update2(&mut c.weight, dw, vw, hyper, lr);
                    sgd_update1(&mut c.bias, db, vb, hyper, lr);
                }
                (
                    Layer::Affine(a),
                    LayerGrads::ConvOrAffine { dw, db },
                    LayerGrads::ConvOrAffine { dw: vw, db: vb },
                ) => {
                    sgd_update2(&mut a.weight, dw, vw, hyper, lr);
                    sgd_update1(&mut a.bias, db, vb, hyper, lr);
                }
                (
                    Layer::BatchNorm2d(b),
                    LayerGrads::BatchNorm { dgamma, dbeta },
                    LayerGrads::BatchNorm { dgamma: vg, dbeta: vb },
                ) => {
                    sgd_update1(&mut b.gamma, dgamma, vg, hyper, lr);
                    sgd_update1(&mut b.beta, dbeta, vb, hyper, lr);
                }
                _ => {}
            }
        }
    }
}

fn sgd_update2(w: &mut Array2<f32>, g: &Array2<f32>, v: &mut Array2<f32>, h: &TrainHyper, lr: f32) {
    for ((w, &g), v) in w.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
        *v = h.momentum * *v + g + h.weight_decay * *w;
        *w -= lr * *v;
    }
}

fn sgd_update1(w: &mut Array1<f32>, g: &Array1<f32>, v: &mut Array1<f32>, h: &TrainHyper, lr: f32) {
    for ((w, &g), v) in w.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
        *v = h.momentum * *v + g + h.weight_decay * *w;
        *w -= lr * *v;
    }
}

fn lr_at_epoch(hyper: &TrainHyper, epoch: usize) -> f32 {
    let passed = hyper.lr_milestones.iter().filter(|&&m| epoch >= m).count();
    hyper.learning_rate * hyper.lr_gamma.powi(passed as i32)
}

/// Mean loss over the full dataset in evaluation mode, computed in chunks.
pub fn dataset_loss(model: &LayeredClassifier, data: &Batch) -> Result<f32> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Input("loss of an empty dataset".into()));
    }
    let chunk = 256;
    let mut total = 0f64;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let sub = data.select(&idx);
        let logits = model.forward(&sub.inputs)?;
        let (loss, _) = softmax_xent(&logits, &sub.labels)?;
        total += loss as f64 * sub.len() as f64;
        start = end;
    }
    Ok((total / n as f64) as f32)
}

/// Train the model in place. Returns the loss before and after; errors if the
/// loss diverges or fails to improve over the run.
pub fn train(model: &mut LayeredClassifier, data: &Batch, hyper: &TrainHyper) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Input("training on an empty dataset".into()));
    }
    let initial_loss = dataset_loss(model, data)?;
    if hyper.epochs == 0 {
        return Ok(TrainReport { initial_loss, final_loss: initial_loss, epochs_run: 0 });
    }
    let mut state = SgdState::new(model);
    let n = data.len();
    for epoch in 0..hyper.epochs {
        let lr = lr_at_epoch(hyper, epoch);
        let order = shuffled_indices(n, child_seed_indexed(hyper.seed, "epoch-shuffle", epoch as u64));
        let mut start = 0;
        while start < n {
            let end = (start + hyper.batch_size).min(n);
            let batch = data.select(&order[start..end]);
            let (logits, tape) = model.forward_cached(&batch.inputs, true)?;
            let (loss, dlogits) = softmax_xent(&logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Training { epoch, msg: format!("non-finite loss {loss}") });
            }
            let (grads, _) = model.backward(&tape, dlogits, false)?;
            model.apply_bn_updates(&tape);
            state.step(model, &grads, hyper, lr);
            start = end;
        }
    }
    let final_loss = dataset_loss(model, data)?;
    if !final_loss.is_finite() {
        return Err(Error::Training { epoch: hyper.epochs, msg: "diverged".into() });
    }
    if final_loss >= initial_loss {
        return Err(Error::Training {
            epoch: hyper.epochs,
            msg: format!("loss did not improve: {initial_loss} -> {final_loss}"),
        });
    }
    Ok(TrainReport { initial_loss, final_loss, epochs_run: hyper.epochs })
}

/// Top-1 accuracy on a batch, evaluated in chunks.
pub fn accuracy(model: &LayeredClassifier, data: &Batch) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::Evaluation("accuracy of an empty dataset".into()));
    }
    let preds = predictions(model, data)?;
    let correct = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f32 / data.len() as f32)
}

/// Predicted class per sample, evaluated in chunks.
pub fn predictions(model: &LayeredClassifier, data: &Batch) -> Result<Vec<usize>> {
    let n = data.len();
    let chunk = 256;
    let mut preds = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let sub = data.select(&idx);
        let logits = model.forward(&sub.inputs)?;
        preds.extend(super::network::argmax_rows(&logits));
        start = end;
    }
    Ok(preds)
}
