//! Networks for counting and estimating sinusoids in low-resolution frames.
//!
//! A softmax detection network picks the count `m`; the estimator trained for
//! that count then recovers amplitude, frequency and phase one sinusoid at a
//! time, subtracting each reconstructed tone before the next block runs.

pub mod arch;
pub mod baseline;
pub mod data;
pub mod detection;
pub mod error;
pub mod estimator;
pub mod model;
pub mod train;

pub use baseline::{BaselineKind, BaselineModel};
pub use detection::DetectionModel;
pub use error::{Error, Result};
pub use estimator::{reconstruct, ResidualMode, SinusoidEstimator};
pub use model::{BundleManifest, SignalNetModel};
pub use train::{TrainConfig, TrainLog};
