//! The layered classifier: an ordered stack of layers split into a feature
//! extractor `g` and a single affine classification head, with recorded
//! forward/backward passes, named parameter access, and multiplicative
//! per-neuron noise application.

use ndarray::{Array1, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::layers::{Affine, Layer, LayerCache, LayerGrads, Shape, Value};
use super::registry::ArchDescriptor;
use crate::error::{Error, Result};

/// Which parameter groups receive neuron noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSelection {
    pub include_conv: bool,
    pub include_affine: bool,
    pub include_norm_affine: bool,
}

impl Default for ParamSelection {
    fn default() -> Self {
        ParamSelection { include_conv: true, include_affine: true, include_norm_affine: false }
    }
}

/// A batch of images with labels. Inputs are `N x C x H x W` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Array4<f32>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array4<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(Error::Input(format!(
                "batch has {} inputs but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if !inputs.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("batch inputs contain non-finite values".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!("label {bad} out of range 0..{num_classes}")));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather a sub-batch by positions.
    pub fn select(&self, idx: &[usize]) -> Batch {
        let inputs = self.inputs.select(Axis(0), idx);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Batch { inputs, labels }
    }
}

/// Role of a named parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        matches!(self, ParamRole::Weight | ParamRole::Bias)
    }
}

/// Addressable parameter description, in checkpoint order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub layer: usize,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub len: usize,
}

/// Recorded forward pass: per-layer caches plus the logits.
pub struct Tape {
    caches: Vec<LayerCache>,
}

/// Gradients for every layer, in layer order.
#[derive(Debug, Clone)]
pub struct Grads {
    pub per_layer: Vec<LayerGrads>,
}

impl Grads {
    pub fn zeros_like(model: &LayeredClassifier) -> Grads {
        let per_layer = model
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d(c) => LayerGrads::ConvOrAffine {
                    dw: Array2::zeros(c.weight.raw_dim()),
                    db: Array1::zeros(c.bias.raw_dim()),
                },
                Layer::Affine(a) => LayerGrads::ConvOrAffine {
                    dw: Array2::zeros(a.weight.raw_dim()),
                    db: Array1::zeros(a.bias.raw_dim()),
                },
                Layer::BatchNorm2d(b) => LayerGrads::BatchNorm {
                    dgamma: Array1::zeros(b.gamma.raw_dim()),
                    dbeta: Array1::zeros(b.beta.raw_dim()),
                },
                _ => LayerGrads::None,
            })
            .collect();
        Grads { per_layer }
    }

    pub fn accumulate(&mut self, other: &Grads, scale: f32) {
        for (a, b) in self.per_layer.iter_mut().zip(&other.per_layer) {
            match (a, b) {
                (
                    LayerGrads::ConvOrAffine { dw, db },
                    LayerGrads::ConvOrAffine { dw: ow, db: ob },
                ) => {
                    dw.scaled_add(scale, ow);
                    db.scaled_add(scale, ob);
                }
                (
                    LayerGrads::BatchNorm { dgamma, dbeta },
                    LayerGrads::BatchNorm { dgamma: og, dbeta: ob },
                ) => {
                    dgamma.scaled_add(scale, og);
                    dbeta.scaled_add(scale, ob);
                }
                _ => {}
            }
        }
    }
}

/// A trainable classifier `f = f_L . g` with a declared split point.
#[derive(Debug, Clone)]
pub struct LayeredClassifier {
    pub layers: Vec<Layer>,
    pub split_index: usize,
    pub num_classes: usize,
    pub input_shape: (usize, usize, usize),
    pub arch: ArchDescriptor,
    latent_len: usize,
}

impl LayeredClassifier {
    /// Validates the split invariants: the head is a single affine layer and
    /// the feature extractor produces a flat latent of matching width.
    pub fn new(
        layers: Vec<Layer>,
        split_index: usize,
        num_classes: usize,
        input_shape: (usize, usize, usize),
        arch: ArchDescriptor,
    ) -> Result<Self> {
        if split_index + 1 != layers.len() {
            return Err(Error::Config(format!(
                "head must be a single layer: split {} of {}",
                split_index,
                layers.len()
            )));
        }
        let mut shape = Shape::Spatial(input_shape.0, input_shape.1, input_shape.2);
        for (i, layer) in layers.iter().enumerate().take(split_index) {
            shape = layer.infer_shape(i, shape)?;
        }
        let latent_len = match shape {
            Shape::Flat(d) => d,
            Shape::Spatial(..) => {
                return Err(Error::Config("latent feature must be flat before the head".into()))
            }
        };
        match &layers[split_index] {
            Layer::Affine(a) => {
                if a.weight.shape()[1] != latent_len {
                    return Err(Error::Config(format!(
                        "head expects {} features, latent has {latent_len}",
                        a.weight.shape()[1]
                    )));
                }
                if a.weight.shape()[0] != num_classes {
                    return Err(Error::Config(format!(
                        "head produces {} logits for {num_classes} classes",
                        a.weight.shape()[0]
                    )));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "classification head must be affine, found {}",
                    other.kind_name()
                )))
            }
        }
        Ok(LayeredClassifier { layers, split_index, num_classes, input_shape, arch, latent_len })
    }

    pub fn latent_len(&self) -> usize {
        self.latent_len
    }

    fn head(&self) -> &Affine {
        match &self.layers[self.split_index] {
            Layer::Affine(a) => a,
            _ => unreachable!("validated at construction"),
        }
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (c, h, w) = self.input_shape;
        let s = x.shape();
        if s[1] != c || s[2] != h || s[3] != w {
            return Err(Error::Input(format!(
                "input shape {}x{}x{} does not match model input {c}x{h}x{w}",
                s[1], s[2], s[3]
            )));
        }
        Ok(())
    }

    /// Plain forward pass in evaluation mode.
    pub fn forward(&self, x: &Array4<f32>) -> Result<Array2<f32>> {
        self.check_input(x)?;
        let mut v = Value::Spatial(x.clone());
        for layer in &self.layers {
            let (out, _) = layer.forward(v, false, false)?;
            v = out;
        }
        v.into_flat()
    }

    /// Forward pass returning the latent features and the logits.
    pub fn forward_split(&self, x: &Array4<f32>) -> Result<(Array2<f32>, Array2<f32>)> {
        self.check_input(x)?;
        let mut v = Value::Spatial(x.clone());
        for layer in &self.layers[..self.split_index] {
            let (out, _) = layer.forward(v, false, false)?;
            v = out;
        }
        let features = v.into_flat()?;
        let logits = self.head_forward(&features)?;
        Ok((features, logits))
    }

    /// Head applied to raw latent features.
    pub fn head_forward(&self, features: &Array2<f32>) -> Result<Array2<f32>> {
        let a = self.head();
        if features.shape()[1] != self.latent_len {
            return Err(Error::Config(format!(
                "features have width {}, latent is {}",
                features.shape()[1],
                self.latent_len
            )));
        }
        let mut y = features.dot(&a.weight.t());
        y += &a.bias;
        Ok(y)
    }

    /// Head applied to features scaled elementwise by a mask in `[0, 1]`.
    pub fn masked_head(&self, features: &Array2<f32>, mask: &Array1<f32>) -> Result<Array2<f32>> {
        if mask.len() != self.latent_len {
            return Err(Error::Config(format!(
                "mask has {} entries, latent is {}",
                mask.len(),
                self.latent_len
            )));
        }
        if mask.iter().any(|&m| !(0.0..=1.0).contains(&m)) {
            return Err(Error::Config("mask entries must lie in [0, 1]".into()));
        }
        let masked = features * &mask.view().insert_axis(Axis(0));
        self.head_forward(&masked)
    }

    /// Recorded forward pass. `bn_train` selects batch statistics in
    /// normalization layers and queues running-statistic updates on the tape.
    pub fn forward_cached(&self, x: &Array4<f32>, bn_train: bool) -> Result<(Array2<f32>, Tape)> {
        self.check_input(x)?;
        let mut v = Value::Spatial(x.clone());
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = layer.forward(v, bn_train, true)?;
            caches.push(cache);
            v = out;
        }
        Ok((v.into_flat()?, Tape { caches }))
    }

    /// Apply any running-statistic updates recorded on the tape.
    pub fn apply_bn_updates(&mut self, tape: &Tape) {
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches) {
            if let (Layer::BatchNorm2d(b), LayerCache::BatchNorm { stats_update: Some((m, v)), .. }) =
                (layer, cache)
            {
                b.running_mean.assign(m);
                b.running_var.assign(v);
            }
        }
    }

    /// Backward pass from logit gradients. Returns parameter gradients and,
    /// when requested, the gradient with respect to the input batch.
    pub fn backward(
        &self,
        tape: &Tape,
        dlogits: Array2<f32>,
        want_input: bool,
    ) -> Result<(Grads, Option<Array4<f32>>)> {
        let mut dv = Value::Flat(dlogits);
        let mut per_layer = vec![LayerGrads::None; self.layers.len()];
        let mut dinput = None;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let need_dx = i > 0 || want_input;
            let (grads, dx) = layer.backward(&tape.caches[i], dv, need_dx)?;
            per_layer[i] = grads;
            match dx {
                Some(v) => {
                    if i == 0 {
                        dinput = Some(v.into_spatial()?);
                        dv = Value::Flat(Array2::zeros((0, 0)));
                    } else {
                        dv = v;
                    }
                }
                None => dv = Value::Flat(Array2::zeros((0, 0))),
            }
        }
        Ok((Grads { per_layer }, dinput))
    }

    /// Mean cross-entropy loss and parameter gradients on a batch,
    /// evaluation-mode normalization.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f32, Grads)> {
        let (logits, tape) = self.forward_cached(&batch.inputs, false)?;
        let (loss, dlogits) = softmax_xent(&logits, &batch.labels)?;
        let (grads, _) = self.backward(&tape, dlogits, false)?;
        Ok((loss, grads))
    }

    /// Ordered parameter descriptions covering every tensor in the model,
    /// including non-trainable running statistics.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut push = |role: ParamRole, shape: Vec<usize>| {
                let role_name = match role {
                    ParamRole::Weight => "weight",
                    ParamRole::Bias => "bias",
                    ParamRole::RunningMean => "running_mean",
                    ParamRole::RunningVar => "running_var",
                };
                specs.push(ParamSpec {
                    name: format!("layer{i}.{role_name}"),
                    layer: i,
                    role,
                    len: shape.iter().product(),
                    shape,
                });
            };
            match layer {
                Layer::Conv2d(c) => {
                    push(ParamRole::Weight, vec![c.out_ch, c.in_ch, c.kernel, c.kernel]);
                    push(ParamRole::Bias, vec![c.out_ch]);
                }
                Layer::Affine(a) => {
                    push(ParamRole::Weight, vec![a.weight.shape()[0], a.weight.shape()[1]]);
                    push(ParamRole::Bias, vec![a.bias.len()]);
                }
                Layer::BatchNorm2d(b) => {
                    push(ParamRole::Weight, vec![b.gamma.len()]);
                    push(ParamRole::Bias, vec![b.beta.len()]);
                    push(ParamRole::RunningMean, vec![b.running_mean.len()]);
                    push(ParamRole::RunningVar, vec![b.running_var.len()]);
                }
                _ => {}
            }
        }
        specs
    }

    /// Raw values of the parameter addressed by `(layer, role)`.
    pub fn param_values(&self, layer: usize, role: ParamRole) -> Result<Vec<f32>> {
        let missing =
            || Error::Config(format!("layer {layer} has no parameter with role {role:?}"));
        let l = self.layers.get(layer).ok_or_else(missing)?;
        match (l, role) {
            (Layer::Conv2d(c), ParamRole::Weight) => Ok(c.weight.iter().copied().collect()),
            (Layer::Conv2d(c), ParamRole::Bias) => Ok(c.bias.to_vec()),
            (Layer::Affine(a), ParamRole::Weight) => Ok(a.weight.iter().copied().collect()),
            (Layer::Affine(a), ParamRole::Bias) => Ok(a.bias.to_vec()),
            (Layer::BatchNorm2d(b), ParamRole::Weight) => Ok(b.gamma.to_vec()),
            (Layer::BatchNorm2d(b), ParamRole::Bias) => Ok(b.beta.to_vec()),
            (Layer::BatchNorm2d(b), ParamRole::RunningMean) => Ok(b.running_mean.to_vec()),
            (Layer::BatchNorm2d(b), ParamRole::RunningVar) => Ok(b.running_var.to_vec()),
            _ => Err(missing()),
        }
    }

    /// Overwrite the parameter addressed by `(layer, role)`.
    pub fn set_param_values(&mut self, layer: usize, role: ParamRole, values: &[f32]) -> Result<()> {
        let missing =
            || Error::Config(format!("layer {layer} has no parameter with role {role:?}"));
        let l = self.layers.get_mut(layer).ok_or_else(missing)?;
        let assign1 = |dst: &mut Array1<f32>, src: &[f32]| -> Result<()> {
            if dst.len() != src.len() {
                return Err(Error::Config(format!(
                    "parameter length mismatch: {} vs {}",
                    dst.len(),
                    src.len()
                )));
            }
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s;
            }
            Ok(())
        };
        let assign2 = |dst: &mut Array2<f32>, src: &[f32]| -> Result<()> {
            if dst.len() != src.len() {
                return Err(Error::Config(format!(
                    "parameter length mismatch: {} vs {}",
                    dst.len(),
                    src.len()
                )));
            }
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s;
            }
            Ok(())
        };
        match (l, role) {
            (Layer::Conv2d(c), ParamRole::Weight) => assign2(&mut c.weight, values),
            (Layer::Conv2d(c), ParamRole::Bias) => assign1(&mut c.bias, values),
            (Layer::Affine(a), ParamRole::Weight) => assign2(&mut a.weight, values),
            (Layer::Affine(a), ParamRole::Bias) => assign1(&mut a.bias, values),
            (Layer::BatchNorm2d(b), ParamRole::Weight) => assign1(&mut b.gamma, values),
            (Layer::BatchNorm2d(b), ParamRole::Bias) => assign1(&mut b.beta, values),
            (Layer::BatchNorm2d(b), ParamRole::RunningMean) => assign1(&mut b.running_mean, values),
            (Layer::BatchNorm2d(b), ParamRole::RunningVar) => assign1(&mut b.running_var, values),
            _ => Err(missing()),
        }
    }

    /// Layer indices selected for neuron noise, with their neuron counts, in
    /// layer order. Selection is deterministic for a given model.
    pub fn noise_units(&self, selection: &ParamSelection) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Layer::Conv2d(c) if selection.include_conv => Some((i, c.out_ch)),
                Layer::Affine(a) if selection.include_affine => Some((i, a.weight.shape()[0])),
                Layer::BatchNorm2d(b) if selection.include_norm_affine => Some((i, b.gamma.len())),
                _ => None,
            })
            .collect()
    }

    /// Clone with each selected neuron's weight vector scaled by `1 + delta_j`
    /// and its bias by `1 + xi_j`. Stored parameters are untouched.
    pub fn with_neuron_noise(
        &self,
        selection: &ParamSelection,
        delta: &[f32],
        xi: &[f32],
    ) -> Result<LayeredClassifier> {
        let units = self.noise_units(selection);
        let total: usize = units.iter().map(|(_, u)| u).sum();
        if delta.len() != total || xi.len() != total {
            return Err(Error::Config(format!(
                "noise has {} (delta) / {} (xi) entries for {total} selected neurons",
                delta.len(),
                xi.len()
            )));
        }
        let mut noised = self.clone();
        let mut off = 0;
        for (idx, n) in units {
            match &mut noised.layers[idx] {
                Layer::Conv2d(c) => {
                    for j in 0..n {
                        let s = 1.0 + delta[off + j];
                        c.weight.row_mut(j).mapv_inplace(|v| v * s);
                        c.bias[j] *= 1.0 + xi[off + j];
                    }
                }
                Layer::Affine(a) => {
                    for j in 0..n {
                        let s = 1.0 + delta[off + j];
                        a.weight.row_mut(j).mapv_inplace(|v| v * s);
                        a.bias[j] *= 1.0 + xi[off + j];
                    }
                }
                Layer::BatchNorm2d(b) => {
                    for j in 0..n {
                        b.gamma[j] *= 1.0 + delta[off + j];
                        b.beta[j] *= 1.0 + xi[off + j];
                    }
                }
                _ => unreachable!("noise_units only selects parameterized layers"),
            }
            off += n;
        }
        Ok(noised)
    }

    /// Map gradients computed on the noised clone to gradients with respect to
    /// the noise entries: `d/d delta_j = <dW'_j, W_j>` and `d/d xi_j = db'_j * b_j`.
    pub fn noise_grads(
        &self,
        selection: &ParamSelection,
        noised_grads: &Grads,
    ) -> (Vec<f32>, Vec<f32>) {
        let units = self.noise_units(selection);
        let total: usize = units.iter().map(|(_, u)| u).sum();
        let mut g_delta = vec![0.0f32; total];
        let mut g_xi = vec![0.0f32; total];
        let mut off = 0;
        for (idx, n) in units {
            match (&self.layers[idx], &noised_grads.per_layer[idx]) {
                (Layer::Conv2d(c), LayerGrads::ConvOrAffine { dw, db }) => {
                    for j in 0..n {
                        g_delta[off + j] = c.weight.row(j).dot(&dw.row(j));
                        g_xi[off + j] = c.bias[j] * db[j];
                    }
                }
                (Layer::Affine(a), LayerGrads::ConvOrAffine { dw, db }) => {
                    for j in 0..n {
                        g_delta[off + j] = a.weight.row(j).dot(&dw.row(j));
                        g_xi[off + j] = a.bias[j] * db[j];
                    }
                }
                (Layer::BatchNorm2d(b), LayerGrads::BatchNorm { dgamma, dbeta }) => {
                    for j in 0..n {
                        g_delta[off + j] = b.gamma[j] * dgamma[j];
                        g_xi[off + j] = b.beta[j] * dbeta[j];
                    }
                }
                _ => {}
            }
            off += n;
        }
        (g_delta, g_xi)
    }

    /// Map gradients computed on a noised clone back to gradients with respect
    /// to the stored (un-noised) parameters: each selected row picks up the
    /// factor `1 + delta_j`, biases `1 + xi_j`.
    pub fn base_grads_from_noised(
        &self,
        selection: &ParamSelection,
        delta: &[f32],
        xi: &[f32],
        mut noised_grads: Grads,
    ) -> Grads {
        let units = self.noise_units(selection);
        let mut off = 0;
        for (idx, n) in units {
            match &mut noised_grads.per_layer[idx] {
                LayerGrads::ConvOrAffine { dw, db } => {
                    for j in 0..n {
                        let s = 1.0 + delta[off + j];
                        dw.row_mut(j).mapv_inplace(|v| v * s);
                        db[j] *= 1.0 + xi[off + j];
                    }
                }
                LayerGrads::BatchNorm { dgamma, dbeta } => {
                    for j in 0..n {
                        dgamma[j] *= 1.0 + delta[off + j];
                        dbeta[j] *= 1.0 + xi[off + j];
                    }
                }
                LayerGrads::None => {}
            }
            off += n;
        }
        noised_grads
    }
}

/// Mean cross-entropy over the batch: negative log-softmax at the true label.
pub fn cross_entropy(logits: &Array2<f32>, labels: &[usize]) -> Result<f32> {
    let (loss, _) = softmax_xent(logits, labels)?;
    Ok(loss)
}

/// Loss plus the gradient with respect to the logits (already scaled by `1/N`).
pub fn softmax_xent(logits: &Array2<f32>, labels: &[usize]) -> Result<(f32, Array2<f32>)> {
    let n = logits.shape()[0];
    let c = logits.shape()[1];
    if labels.len() != n {
        return Err(Error::Input(format!("{n} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Input(format!("label {bad} out of range 0..{c}")));
    }
    if n == 0 {
        return Err(Error::Input("cross-entropy on an empty batch".into()));
    }
    let mut dlogits = Array2::zeros((n, c));
    let mut total = 0f64;
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0f32;
        for &v in row.iter() {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        total += (log_denom - (logits[[i, labels[i]]] - max)) as f64;
        for j in 0..c {
            let p = (logits[[i, j]] - max).exp() / denom;
            dlogits[[i, j]] = (p - if j == labels[i] { 1.0 } else { 0.0 }) / n as f32;
        }
    }
    Ok(((total / n as f64) as f32, dlogits))
}

/// Top-1 predictions from logits.
pub fn argmax_rows(logits: &Array2<f32>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            let mut best_v = f32::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best
        })
        .collect()
}
