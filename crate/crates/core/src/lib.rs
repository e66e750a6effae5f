//! Interpretable image classifier that reasons with prototypes.
//!
//! A convolutional autoencoder maps images to a latent code; a prototype
//! layer measures squared distances from the code to `m` learned
//! prototypes; a linear layer and softmax turn distances into class
//! probabilities. Decoding the prototypes shows what the network compares
//! against.
//!
//! Modules, bottom up: [`tensor`] (dense tensors and hand-written
//! gradients), [`dataset`], [`augment`], [`model`], [`loss`], [`train`],
//! [`explain`].

pub mod augment;
pub mod dataset;
pub mod explain;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use dataset::Dataset;
pub use loss::{Hyperparams, LossBreakdown, Optimizer};
pub use model::{preset, ModelConfig, NetworkParams, Preset, WMode};
pub use tensor::Tensor;

/// Version string recorded in run directories.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
