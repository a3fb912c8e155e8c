//! Differentiable layered classifiers with a feature/head split, noised
//! forward passes, and generic SGD training.

pub mod layers;
pub mod network;
pub mod registry;
pub mod train;

pub use layers::{ActKind, Layer};
pub use network::{
    argmax_rows, cross_entropy, softmax_xent, Batch, Grads, LayeredClassifier, ParamRole,
    ParamSelection, ParamSpec,
};
pub use registry::{build_model, ArchDescriptor};
pub use train::{accuracy, dataset_loss, predictions, train, TrainHyper, TrainReport};
