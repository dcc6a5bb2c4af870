//! Hybrid convolutional + recurrent image classifier built from first principles.
//!
//! The network is a VGG16-style feature extractor (13 convolutions in five
//! blocks, each block closed by a 2x2 max pool), whose final feature map is
//! handed to a single LSTM layer and then to a small fully connected head with
//! a softmax over the output classes. Every layer implements its own forward
//! and backward pass; there is no autograd engine.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: dense row-major arrays, matmul, elementwise ops, seeded init.
//! - [`layers`]: convolution, max pooling, ReLU, flatten, dense, softmax.
//! - [`recurrent`]: LSTM cell and sequence layer with backpropagation through time.
//! - [`model`]: architecture assembly, end-to-end backward, checkpoint files.
//! - [`optim`]: cross-entropy, Adam, and the epoch loop.
//! - [`data`]: directory-per-class image loading, resize, rotation, split, batching.
//! - [`metrics`]: confusion matrix, per-class and aggregate metrics, ROC-AUC, CSV export.

pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod recurrent;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Rng, Tensor};
