//! Minimal neural-network engine: channels-last 1-D convolution, pooling,
//! batch normalization, dense layers and activations wired as a
//! single-parent DAG, with hand-written backward passes, Adam, a
//! finite-difference gradient checker and a binary checkpoint format.
//!
//! Tensors are batch-major. Convolutional activations are `[batch, length,
//! channels]`, dense activations `[batch, features]`.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod network;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{NnError, Result};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use layer::{Activation, LayerSpec, Param};
pub use network::{Mode, Network, NetworkBuilder, ValueId};
pub use optim::Adam;
pub use scalar::Scalar;
pub use tensor::Tensor;
