//! Hand-built fixture networks shared by unit and integration tests.
//! Values are small enough to verify every forward pass on paper.

use ndarray::{arr1, arr2, Array1, Array2, Array4};

use crate::model::layers::{ActKind, Affine, Layer};
use crate::model::registry::ArchDescriptor;
use crate::model::{Batch, LayeredClassifier};

fn marker_arch() -> ArchDescriptor {
    ArchDescriptor::Mlp { hidden: vec![], activation: ActKind::Relu }
}

/// Two-layer net on a 2-vector input:
/// `g` = flatten + affine([[1,-1],[0.5,2]], [0,-1]) + relu, head = affine([[1,2],[-1,1]], [0.5,0]).
///
/// For x = [2, 5]: pre-activation [-3, 10], features [0, 10], logits [20.5, 10].
pub fn tiny_two_layer() -> LayeredClassifier {
    let layers = vec![
        Layer::Flatten,
        Layer::Affine(Affine {
            weight: arr2(&[[1.0, -1.0], [0.5, 2.0]]),
            bias: arr1(&[0.0, -1.0]),
        }),
        Layer::Activation(ActKind::Relu),
        Layer::Affine(Affine {
            weight: arr2(&[[1.0, 2.0], [-1.0, 1.0]]),
            bias: arr1(&[0.5, 0.0]),
        }),
    ];
    LayeredClassifier::new(layers, 3, 2, (2, 1, 1), marker_arch()).unwrap()
}

/// Affine-only model: flatten + head with the given weight and bias.
pub fn affine_only(weight: Array2<f32>, bias: Array1<f32>) -> LayeredClassifier {
    let in_dim = weight.shape()[1];
    affine_on_shape(weight, bias, (in_dim, 1, 1))
}

/// Affine-only model over a declared spatial input shape.
pub fn affine_on_shape(
    weight: Array2<f32>,
    bias: Array1<f32>,
    input_shape: (usize, usize, usize),
) -> LayeredClassifier {
    let classes = weight.shape()[0];
    let layers = vec![Layer::Flatten, Layer::Affine(Affine { weight, bias })];
    LayeredClassifier::new(layers, 1, classes, input_shape, marker_arch()).unwrap()
}

/// Wrap flat rows into the `N x C x 1 x 1` batch layout used by vector models.
pub fn vec_batch(rows: &[Vec<f32>], labels: Vec<usize>, classes: usize) -> Batch {
    let n = rows.len();
    let d = rows[0].len();
    let mut inputs = Array4::zeros((n, d, 1, 1));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            inputs[[i, j, 0, 0]] = v;
        }
    }
    Batch::new(inputs, labels, classes).unwrap()
}

/// Central finite differences of `f` around `p`, one entry at a time.
pub fn finite_diff(p: &[f32], h: f32, mut f: impl FnMut(&[f32]) -> f32) -> Vec<f32> {
    let mut grad = vec![0.0f32; p.len()];
    let mut work = p.to_vec();
    for i in 0..p.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error between an analytic gradient and its finite-difference
/// estimate, measured as a ratio of L2 norms.
pub fn grad_rel_err(analytic: &[f32], fd: &[f32]) -> f32 {
    let diff: f32 = analytic.iter().zip(fd).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt();
    let norm: f32 = fd.iter().map(|v| v * v).sum::<f32>().sqrt();
    diff / norm.max(1e-12)
}
