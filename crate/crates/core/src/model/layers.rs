//! Layer primitives: convolution, affine, batch normalization, nonlinearity,
//! pooling and flatten, each with an explicit forward and backward pass.
//!
//! Activations flow between layers as [`Value`]s, either spatial `N x C x H x W`
//! tensors or flat `N x D` matrices. Convolutions are evaluated through an
//! im2col lowering so the heavy lifting is a single matrix product per batch.

use ndarray::{Array1, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activation kinds supported by the registry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActKind {
    Relu,
    LeakyRelu,
}

impl ActKind {
    pub fn slope(self) -> f32 {
        match self {
            ActKind::Relu => 0.0,
            ActKind::LeakyRelu => 0.1,
        }
    }
}

/// Activations flowing between layers.
#[derive(Debug, Clone)]
pub enum Value {
    Spatial(Array4<f32>),
    Flat(Array2<f32>),
}

impl Value {
    pub fn batch_len(&self) -> usize {
        match self {
            Value::Spatial(a) => a.shape()[0],
            Value::Flat(a) => a.shape()[0],
        }
    }

    pub fn into_flat(self) -> Result<Array2<f32>> {
        match self {
            Value::Flat(a) => Ok(a),
            Value::Spatial(_) => Err(Error::Config(
                "expected a flat activation, found a spatial one".into(),
            )),
        }
    }

    pub fn into_spatial(self) -> Result<Array4<f32>> {
        match self {
            Value::Spatial(a) => Ok(a),
            Value::Flat(_) => Err(Error::Config(
                "expected a spatial activation, found a flat one".into(),
            )),
        }
    }
}

/// Shape of an activation, used for static shape inference at model build time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Spatial(c, h, w) => c * h * w,
            Shape::Flat(d) => d,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// Weight in matrix form, `(out_ch, in_ch * k * k)`; row-major identical to
    /// the logical `(out_ch, in_ch, k, k)` layout recorded in checkpoints.
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct Affine {
    /// `(out_dim, in_dim)`.
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub eps: f32,
    pub momentum: f32,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    Affine(Affine),
    BatchNorm2d(BatchNorm2d),
    Activation(ActKind),
    MaxPool2d { kernel: usize },
    Flatten,
}

/// Per-layer cache produced by a recorded forward pass and consumed by backward.
#[derive(Debug)]
pub enum LayerCache {
    Conv {
        /// im2col matrix for the whole batch, `(in_ch*k*k, n*out_h*out_w)`.
        cols: Array2<f32>,
        in_shape: (usize, usize, usize, usize),
        out_hw: (usize, usize),
    },
    Affine {
        input: Array2<f32>,
    },
    BatchNorm {
        x_hat: Array4<f32>,
        inv_std: Array1<f32>,
        /// Whether batch statistics were used (changes the backward formula).
        batch_stats: bool,
        /// Pending running-statistic update (training mode only).
        stats_update: Option<(Array1<f32>, Array1<f32>)>,
    },
    Activation {
        /// Multiplier applied elementwise (1 above zero, slope below).
        mult: Value,
    },
    MaxPool {
        /// Flat index of the maximum within each pooling window.
        argmax: Array4<u8>,
        in_shape: (usize, usize, usize, usize),
    },
    Flatten {
        in_shape: (usize, usize, usize, usize),
    },
    None,
}

/// Gradients with respect to one layer's parameters.
#[derive(Debug, Clone)]
pub enum LayerGrads {
    ConvOrAffine { dw: Array2<f32>, db: Array1<f32> },
    BatchNorm { dgamma: Array1<f32>, dbeta: Array1<f32> },
    None,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv",
            Layer::Affine(_) => "affine",
            Layer::BatchNorm2d(_) => "batch_norm",
            Layer::Activation(_) => "activation",
            Layer::MaxPool2d { .. } => "max_pool",
            Layer::Flatten => "flatten",
        }
    }

    /// Static shape inference; errors describe the offending layer.
    pub fn infer_shape(&self, idx: usize, input: Shape) -> Result<Shape> {
        let bad = |msg: String| Error::Config(format!("layer {idx} ({}): {msg}", self.kind_name()));
        match self {
            Layer::Conv2d(c) => match input {
                Shape::Spatial(ch, h, w) => {
                    if ch != c.in_ch {
                        return Err(bad(format!("expected {} input channels, got {ch}", c.in_ch)));
                    }
                    if h + 2 * c.pad < c.kernel || w + 2 * c.pad < c.kernel {
                        return Err(bad(format!("kernel {} larger than padded input", c.kernel)));
                    }
                    let oh = (h + 2 * c.pad - c.kernel) / c.stride + 1;
                    let ow = (w + 2 * c.pad - c.kernel) / c.stride + 1;
                    Ok(Shape::Spatial(c.out_ch, oh, ow))
                }
                Shape::Flat(_) => Err(bad("requires a spatial input".into())),
            },
            Layer::Affine(a) => match input {
                Shape::Flat(d) => {
                    if d != a.weight.shape()[1] {
                        return Err(bad(format!(
                            "expected input dim {}, got {d}",
                            a.weight.shape()[1]
                        )));
                    }
                    Ok(Shape::Flat(a.weight.shape()[0]))
                }
                Shape::Spatial(..) => Err(bad("requires a flat input".into())),
            },
            Layer::BatchNorm2d(b) => match input {
                Shape::Spatial(ch, h, w) => {
                    if ch != b.gamma.len() {
                        return Err(bad(format!("expected {} channels, got {ch}", b.gamma.len())));
                    }
                    Ok(Shape::Spatial(ch, h, w))
                }
                Shape::Flat(_) => Err(bad("requires a spatial input".into())),
            },
            Layer::Activation(_) => Ok(input),
            Layer::MaxPool2d { kernel } => match input {
                Shape::Spatial(ch, h, w) => {
                    if h % kernel != 0 || w % kernel != 0 {
                        return Err(bad(format!("input {h}x{w} not divisible by pool {kernel}")));
                    }
                    Ok(Shape::Spatial(ch, h / kernel, w / kernel))
                }
                Shape::Flat(_) => Err(bad("requires a spatial input".into())),
            },
            Layer::Flatten => Ok(Shape::Flat(input.numel())),
        }
    }

    /// Forward pass. `bn_train` selects batch statistics for normalization
    /// layers; `record` requests a cache for a later backward pass.
    pub fn forward(&self, input: Value, bn_train: bool, record: bool) -> Result<(Value, LayerCache)> {
        match self {
            Layer::Conv2d(c) => {
                let x = input.into_spatial()?;
                let (out, cols) = conv_forward(c, &x);
                let cache = if record {
                    LayerCache::Conv {
                        cols,
                        in_shape: (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]),
                        out_hw: (out.shape()[2], out.shape()[3]),
                    }
                } else {
                    LayerCache::None
                };
                Ok((Value::Spatial(out), cache))
            }
            Layer::Affine(a) => {
                let x = input.into_flat()?;
                let mut y = x.dot(&a.weight.t());
                y += &a.bias;
                let cache = if record {
                    LayerCache::Affine { input: x }
                } else {
                    LayerCache::None
                };
                Ok((Value::Flat(y), cache))
            }
            Layer::BatchNorm2d(b) => {
                let x = input.into_spatial()?;
                let (y, cache) = bn_forward(b, &x, bn_train, record);
                Ok((Value::Spatial(y), cache))
            }
            Layer::Activation(kind) => {
                let slope = kind.slope();
                let apply = |v: f32| if v > 0.0 { v } else { slope * v };
                let mult = |v: f32| if v > 0.0 { 1.0 } else { slope };
                match input {
                    Value::Spatial(x) => {
                        let y = x.mapv(apply);
                        let cache = if record {
                            LayerCache::Activation { mult: Value::Spatial(x.mapv(mult)) }
                        } else {
                            LayerCache::None
                        };
                        Ok((Value::Spatial(y), cache))
                    }
                    Value::Flat(x) => {
                        let y = x.mapv(apply);
                        let cache = if record {
                            LayerCache::Activation { mult: Value::Flat(x.mapv(mult)) }
                        } else {
                            LayerCache::None
                        };
                        Ok((Value::Flat(y), cache))
                    }
                }
            }
            Layer::MaxPool2d { kernel } => {
                let x = input.into_spatial()?;
                let (y, argmax) = pool_forward(&x, *kernel);
                let cache = if record {
                    LayerCache::MaxPool {
                        argmax,
                        in_shape: (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]),
                    }
                } else {
                    LayerCache::None
                };
                Ok((Value::Spatial(y), cache))
            }
            Layer::Flatten => {
                let x = input.into_spatial()?;
                let n = x.shape()[0];
                let d = x.len() / n;
                let in_shape = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let flat = x
                    .into_shape_with_order((n, d))
                    .map_err(|e| Error::Config(format!("flatten reshape: {e}")))?;
                let cache = if record { LayerCache::Flatten { in_shape } } else { LayerCache::None };
                Ok((Value::Flat(flat), cache))
            }
        }
    }

    /// Backward pass: given the gradient of the loss with respect to this
    /// layer's output, produce parameter gradients and (optionally) the
    /// gradient with respect to the input.
    pub fn backward(
        &self,
        cache: &LayerCache,
        dout: Value,
        want_input: bool,
    ) -> Result<(LayerGrads, Option<Value>)> {
        match (self, cache) {
            (Layer::Conv2d(c), LayerCache::Conv { cols, in_shape, out_hw }) => {
                let dy = dout.into_spatial()?;
                let (grads, dx) = conv_backward(c, cols, *in_shape, *out_hw, &dy, want_input);
                Ok((grads, dx.map(Value::Spatial)))
            }
            (Layer::Affine(a), LayerCache::Affine { input }) => {
                let dy = dout.into_flat()?;
                let dw = dy.t().dot(input);
                let db = dy.sum_axis(Axis(0));
                let dx = if want_input { Some(Value::Flat(dy.dot(&a.weight))) } else { None };
                Ok((LayerGrads::ConvOrAffine { dw, db }, dx))
            }
            (Layer::BatchNorm2d(b), LayerCache::BatchNorm { x_hat, inv_std, batch_stats, .. }) => {
                let dy = dout.into_spatial()?;
                let (grads, dx) = bn_backward(b, x_hat, inv_std, *batch_stats, &dy, want_input);
                Ok((grads, dx.map(Value::Spatial)))
            }
            (Layer::Activation(_), LayerCache::Activation { mult }) => {
                let dx = match (dout, mult) {
                    (Value::Spatial(dy), Value::Spatial(m)) => Value::Spatial(&dy * m),
                    (Value::Flat(dy), Value::Flat(m)) => Value::Flat(&dy * m),
                    _ => return Err(Error::Config("activation cache rank mismatch".into())),
                };
                Ok((LayerGrads::None, Some(dx)))
            }
            (Layer::MaxPool2d { kernel }, LayerCache::MaxPool { argmax, in_shape }) => {
                let dy = dout.into_spatial()?;
                let dx = pool_backward(&dy, argmax, *in_shape, *kernel);
                Ok((LayerGrads::None, Some(Value::Spatial(dx))))
            }
            (Layer::Flatten, LayerCache::Flatten { in_shape }) => {
                let dy = dout.into_flat()?;
                let dx = dy
                    .into_shape_with_order(*in_shape)
                    .map_err(|e| Error::Config(format!("flatten backward reshape: {e}")))?;
                Ok((LayerGrads::None, Some(Value::Spatial(dx))))
            }
            _ => Err(Error::Config("layer/cache mismatch in backward pass".into())),
        }
    }
}

fn conv_forward(c: &Conv2d, x: &Array4<f32>) -> (Array4<f32>, Array2<f32>) {
    let (n, _, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = (h + 2 * c.pad - c.kernel) / c.stride + 1;
    let ow = (w + 2 * c.pad - c.kernel) / c.stride + 1;
    let cols = im2col(x, c.kernel, c.stride, c.pad, oh, ow);
    // (out_ch, K) x (K, n*oh*ow)
    let mut out_mat = c.weight.dot(&cols);
    for (mut row, &b) in out_mat.axis_iter_mut(Axis(0)).zip(c.bias.iter()) {
        row += b;
    }
    let mut out = Array4::zeros((n, c.out_ch, oh, ow));
    for ni in 0..n {
        for co in 0..c.out_ch {
            for i in 0..oh {
                for j in 0..ow {
                    out[[ni, co, i, j]] = out_mat[[co, ni * oh * ow + i * ow + j]];
                }
            }
        }
    }
    (out, cols)
}

fn conv_backward(
    c: &Conv2d,
    cols: &Array2<f32>,
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
    dy: &Array4<f32>,
    want_input: bool,
) -> (LayerGrads, Option<Array4<f32>>) {
    let (n, _, _, _) = in_shape;
    let (oh, ow) = out_hw;
    // Repack dy as (out_ch, n*oh*ow) to mirror the forward lowering.
    let mut dy_mat = Array2::zeros((c.out_ch, n * oh * ow));
    for ni in 0..n {
        for co in 0..c.out_ch {
            for i in 0..oh {
                for j in 0..ow {
                    dy_mat[[co, ni * oh * ow + i * ow + j]] = dy[[ni, co, i, j]];
                }
            }
        }
    }
    let dw = dy_mat.dot(&cols.t());
    let db = dy_mat.sum_axis(Axis(1));
    let dx = if want_input {
        let dcols = c.weight.t().dot(&dy_mat);
        Some(col2im(&dcols, in_shape, c.kernel, c.stride, c.pad, oh, ow))
    } else {
        None
    };
    (LayerGrads::ConvOrAffine { dw, db }, dx)
}

fn im2col(x: &Array4<f32>, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Array2<f32> {
    let (n, ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut cols = Array2::zeros((ch * k * k, n * oh * ow));
    for ni in 0..n {
        for ci in 0..ch {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    for i in 0..oh {
                        let hi = (i * stride + ki) as isize - pad as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        for j in 0..ow {
                            let wj = (j * stride + kj) as isize - pad as isize;
                            if wj < 0 || wj >= w as isize {
                                continue;
                            }
                            cols[[row, ni * oh * ow + i * ow + j]] =
                                x[[ni, ci, hi as usize, wj as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f32>,
    in_shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<f32> {
    let (n, ch, h, w) = in_shape;
    let mut dx = Array4::zeros((n, ch, h, w));
    for ni in 0..n {
        for ci in 0..ch {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    for i in 0..oh {
                        let hi = (i * stride + ki) as isize - pad as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        for j in 0..ow {
                            let wj = (j * stride + kj) as isize - pad as isize;
                            if wj < 0 || wj >= w as isize {
                                continue;
                            }
                            dx[[ni, ci, hi as usize, wj as usize]] +=
                                dcols[[row, ni * oh * ow + i * ow + j]];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn pool_forward(x: &Array4<f32>, k: usize) -> (Array4<f32>, Array4<u8>) {
    let (n, ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / k, w / k);
    let mut y = Array4::zeros((n, ch, oh, ow));
    let mut argmax = Array4::zeros((n, ch, oh, ow));
    for ni in 0..n {
        for ci in 0..ch {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0u8;
                    for ki in 0..k {
                        for kj in 0..k {
                            let v = x[[ni, ci, i * k + ki, j * k + kj]];
                            if v > best {
                                best = v;
                                best_idx = (ki * k + kj) as u8;
                            }
                        }
                    }
                    y[[ni, ci, i, j]] = best;
                    argmax[[ni, ci, i, j]] = best_idx;
                }
            }
        }
    }
    (y, argmax)
}

fn pool_backward(
    dy: &Array4<f32>,
    argmax: &Array4<u8>,
    in_shape: (usize, usize, usize, usize),
    k: usize,
) -> Array4<f32> {
    let (n, ch, _, _) = in_shape;
    let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
    let mut dx = Array4::zeros(in_shape);
    for ni in 0..n {
        for ci in 0..ch {
            for i in 0..oh {
                for j in 0..ow {
                    let idx = argmax[[ni, ci, i, j]] as usize;
                    let (ki, kj) = (idx / k, idx % k);
                    dx[[ni, ci, i * k + ki, j * k + kj]] += dy[[ni, ci, i, j]];
                }
            }
        }
    }
    dx
}

fn bn_forward(b: &BatchNorm2d, x: &Array4<f32>, train: bool, record: bool) -> (Array4<f32>, LayerCache) {
    let (n, ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let m = (n * h * w) as f32;
    let (mean, var) = if train {
        let mut mean = Array1::zeros(ch);
        let mut var = Array1::zeros(ch);
        for ci in 0..ch {
            let mut s = 0f64;
            for ni in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        s += x[[ni, ci, i, j]] as f64;
                    }
                }
            }
            mean[ci] = (s / m as f64) as f32;
            let mut v = 0f64;
            for ni in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let d = x[[ni, ci, i, j]] - mean[ci];
                        v += (d * d) as f64;
                    }
                }
            }
            var[ci] = (v / m as f64) as f32;
        }
        (mean, var)
    } else {
        (b.running_mean.clone(), b.running_var.clone())
    };

    let inv_std = var.mapv(|v| 1.0 / (v + b.eps).sqrt());
    let mut x_hat = x.clone();
    for ci in 0..ch {
        let mu = mean[ci];
        let is = inv_std[ci];
        for ni in 0..n {
            for i in 0..h {
                for j in 0..w {
                    x_hat[[ni, ci, i, j]] = (x[[ni, ci, i, j]] - mu) * is;
                }
            }
        }
    }
    let mut y = x_hat.clone();
    for ci in 0..ch {
        let g = b.gamma[ci];
        let be = b.beta[ci];
        for ni in 0..n {
            for i in 0..h {
                for j in 0..w {
                    y[[ni, ci, i, j]] = y[[ni, ci, i, j]] * g + be;
                }
            }
        }
    }

    let stats_update = if train {
        // Running variance tracks the unbiased estimate.
        let unbiased = if m > 1.0 { var.mapv(|v| v * m / (m - 1.0)) } else { var.clone() };
        let new_mean = &b.running_mean * (1.0 - b.momentum) + &mean * b.momentum;
        let new_var = &b.running_var * (1.0 - b.momentum) + &unbiased * b.momentum;
        Some((new_mean, new_var))
    } else {
        None
    };

    let cache = if record || stats_update.is_some() {
        LayerCache::BatchNorm { x_hat, inv_std, batch_stats: train, stats_update }
    } else {
        LayerCache::None
    };
    (y, cache)
}

fn bn_backward(
    b: &BatchNorm2d,
    x_hat: &Array4<f32>,
    inv_std: &Array1<f32>,
    batch_stats: bool,
    dy: &Array4<f32>,
    want_input: bool,
) -> (LayerGrads, Option<Array4<f32>>) {
    let (n, ch, h, w) = (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let m = (n * h * w) as f32;
    let mut dgamma = Array1::zeros(ch);
    let mut dbeta = Array1::zeros(ch);
    for ci in 0..ch {
        let mut dg = 0f64;
        let mut db = 0f64;
        for ni in 0..n {
            for i in 0..h {
                for j in 0..w {
                    dg += (dy[[ni, ci, i, j]] * x_hat[[ni, ci, i, j]]) as f64;
                    db += dy[[ni, ci, i, j]] as f64;
                }
            }
        }
        dgamma[ci] = dg as f32;
        dbeta[ci] = db as f32;
    }
    let dx = if want_input {
        let mut dx = Array4::zeros((n, ch, h, w));
        if batch_stats {
            for ci in 0..ch {
                let scale = b.gamma[ci] * inv_std[ci] / m;
                for ni in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            dx[[ni, ci, i, j]] = scale
                                * (m * dy[[ni, ci, i, j]]
                                    - dbeta[ci]
                                    - x_hat[[ni, ci, i, j]] * dgamma[ci]);
                        }
                    }
                }
            }
        } else {
            // Running statistics are constants: the map is elementwise affine.
            for ci in 0..ch {
                let scale = b.gamma[ci] * inv_std[ci];
                for ni in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            dx[[ni, ci, i, j]] = scale * dy[[ni, ci, i, j]];
                        }
                    }
                }
            }
        }
        Some(dx)
    } else {
        None
    };
    (LayerGrads::BatchNorm { dgamma, dbeta }, dx)
}
