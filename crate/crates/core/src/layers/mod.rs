//! Feed-forward layers with explicit forward caches and backward passes.
//!
//! Activations use `[n, c, h, w]` for image-shaped tensors and `[n, features]`
//! for vectors. A backward call is only valid with the cache returned by the
//! matching forward call.

mod activation;
mod conv;
mod dense;
mod flatten;
mod pool;

pub use activation::{relu, relu_backward, softmax, softmax_backward, ReluCache};
pub use conv::{conv_axis, Conv2d, Conv2dCache, Conv2dGrads, Padding};
pub use dense::{Dense, DenseCache, DenseGrads};
pub use flatten::{flatten, flatten_backward, FlattenCache};
pub use pool::{MaxPool2d, MaxPoolCache};
