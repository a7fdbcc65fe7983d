//! Minimal dense numeric core: tensors, the layer graph used by the
//! point-cloud classifiers, manual backpropagation and training.
//!
//! Activations recorded in a [`ForwardTrace`] are post-activation values, so
//! the relevance engine can multiply them directly with the outgoing weights.

pub mod backward;
pub mod io;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use backward::{gradient_check, GradCheck};
pub use io::{load_weights, save_weights};
pub use layers::Activation;
pub use model::{
    ForwardTrace, GroupMode, Grouping, LayerKind, LayerOp, LayerRecord, LayerSpec, Model, ModelSpec, ModelWeights,
    NamedTensor, Topology, TrainingMeta,
};
pub use tensor::Tensor;
pub use train::{accuracy, train, train_samples, TrainConfig, TrainHistory};
