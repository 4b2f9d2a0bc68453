//! Minimal differentiable-computation core.
//!
//! Dense tensors of `f64`, a small layer vocabulary (dense, 3D convolution,
//! transposed 3D convolution, batch norm, pointwise activations, flatten,
//! concat), and models built as ordered DAGs with named inputs. Forward
//! passes cache activations so that a reverse pass can produce exact
//! gradients with respect to every trainable parameter *and* every named
//! input, which is what gradient-based planning over network inputs needs.

mod error;
pub mod gradcheck;
mod graph;
mod layer;
pub mod loss;
pub mod optim;
mod serialize;
mod tensor;

pub use error::TensorNetError;
pub use graph::{ForwardCache, Gradients, GraphBuilder, Mode, NetModel, NodeId};
pub use layer::Layer;
pub use serialize::{load_model, load_model_from_str, save_model, save_model_to_string};
pub use tensor::{gaussian, Tensor};

pub type Result<T> = std::result::Result<T, TensorNetError>;
