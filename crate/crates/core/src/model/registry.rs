//! Architecture registry: a small configurable CNN and an MLP, built from a
//! serializable descriptor with seed-deterministic initialization.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{ActKind, Affine, BatchNorm2d, Conv2d, Layer};
use super::network::LayeredClassifier;
use crate::error::{Error, Result};
use crate::rng::{child_seed_indexed, rng_from_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ArchDescriptor {
    /// Conv blocks (conv + optional batch norm + activation + 2x2 max pool)
    /// followed by a flatten and an affine head.
    Cnn { channels: Vec<usize>, kernel: usize, activation: ActKind, batch_norm: bool },
    /// Flatten followed by affine + activation hidden layers and an affine head.
    Mlp { hidden: Vec<usize>, activation: ActKind },
}

impl ArchDescriptor {
    /// The default desk-scale CNN: two conv blocks, leaky activations, no norm.
    pub fn default_cnn() -> Self {
        ArchDescriptor::Cnn {
            channels: vec![16, 32],
            kernel: 3,
            activation: ActKind::LeakyRelu,
            batch_norm: false,
        }
    }

    /// Four affine layers in total, as a small non-convolutional reference.
    pub fn default_mlp() -> Self {
        ArchDescriptor::Mlp { hidden: vec![256, 128, 64], activation: ActKind::Relu }
    }

    /// Build by short name: `cnn`, `cnn_bn`, or `mlp`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "cnn" => Ok(Self::default_cnn()),
            "cnn_bn" => Ok(ArchDescriptor::Cnn {
                channels: vec![16, 32],
                kernel: 3,
                activation: ActKind::LeakyRelu,
                batch_norm: true,
            }),
            "mlp" => Ok(Self::default_mlp()),
            other => Err(Error::Input(format!("unknown architecture '{other}'"))),
        }
    }
}

fn kaiming_uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f32> {
    let gain = (2.0f32).sqrt();
    let bound = gain * (3.0 / fan_in as f32).sqrt();
    let mut w = Array2::zeros((rows, cols));
    for v in w.iter_mut() {
        *v = rng.random_range(-bound..bound);
    }
    w
}

/// Instantiate a model from its descriptor with seeded initialization.
pub fn build_model(
    arch: &ArchDescriptor,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    seed: u64,
) -> Result<LayeredClassifier> {
    if num_classes < 2 {
        return Err(Error::Input("need at least two classes".into()));
    }
    let mut layers = Vec::new();
    let mut layer_seed = 0u64;
    let next_rng = |i: &mut u64| {
        let r = rng_from_seed(child_seed_indexed(seed, "layer", *i));
        *i += 1;
        r
    };
    match arch {
        ArchDescriptor::Cnn { channels, kernel, activation, batch_norm } => {
            let (c0, mut h, mut w) = input_shape;
            if channels.is_empty() {
                return Err(Error::Input("cnn needs at least one conv block".into()));
            }
            let mut in_ch = c0;
            for &out_ch in channels {
                let k = *kernel;
                let fan_in = in_ch * k * k;
                let mut rng = next_rng(&mut layer_seed);
                layers.push(Layer::Conv2d(Conv2d {
                    weight: kaiming_uniform(&mut rng, out_ch, fan_in, fan_in),
                    bias: Array1::zeros(out_ch),
                    in_ch,
                    out_ch,
                    kernel: k,
                    stride: 1,
                    pad: k / 2,
                }));
                if *batch_norm {
                    layers.push(Layer::BatchNorm2d(BatchNorm2d {
                        gamma: Array1::ones(out_ch),
                        beta: Array1::zeros(out_ch),
                        running_mean: Array1::zeros(out_ch),
                        running_var: Array1::ones(out_ch),
                        eps: 1e-5,
                        momentum: 0.1,
                    }));
                }
                layers.push(Layer::Activation(*activation));
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Input(format!(
                        "input {h}x{w} not divisible by the pooling pyramid"
                    )));
                }
                layers.push(Layer::MaxPool2d { kernel: 2 });
                h /= 2;
                w /= 2;
                in_ch = out_ch;
            }
            layers.push(Layer::Flatten);
            let latent = in_ch * h * w;
            let mut rng = next_rng(&mut layer_seed);
            layers.push(Layer::Affine(Affine {
                weight: kaiming_uniform(&mut rng, num_classes, latent, latent),
                bias: Array1::zeros(num_classes),
            }));
        }
        ArchDescriptor::Mlp { hidden, activation } => {
            let (c, h, w) = input_shape;
            layers.push(Layer::Flatten);
            let mut in_dim = c * h * w;
            for &out_dim in hidden {
                let mut rng = next_rng(&mut layer_seed);
                layers.push(Layer::Affine(Affine {
                    weight: kaiming_uniform(&mut rng, out_dim, in_dim, in_dim),
                    bias: Array1::zeros(out_dim),
                }));
                layers.push(Layer::Activation(*activation));
                in_dim = out_dim;
            }
            let mut rng = next_rng(&mut layer_seed);
            layers.push(Layer::Affine(Affine {
                weight: kaiming_uniform(&mut rng, num_classes, in_dim, in_dim),
                bias: Array1::zeros(num_classes),
            }));
        }
    }
    let split = layers.len() - 1;
    LayeredClassifier::new(layers, split, num_classes, input_shape, arch.clone())
}
