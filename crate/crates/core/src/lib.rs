//! Signal model, quantization, losses, learning thresholds and classical
//! baselines for detecting and estimating complex sinusoids observed through
//! coarse (1 to 3 bit) analog-to-digital converters.
//!
//! The pipeline for one observation is
//!
//! ```text
//! draw_parameters -> synthesize -> add_noise -> normalize_power -> quantize -> to_iq
//! ```
//!
//! and everything downstream (neural estimators, periodogram, AIC/MDL) consumes
//! the resulting [`IqFrame`].

pub mod classical;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod quantize;
pub mod rng;
pub mod signal;
pub mod thresholds;

pub use error::{QsineError, Result};
pub use quantize::QuantizerSpec;
pub use signal::{ComplexFrame, FreqMode, GenConfig, IqFrame, LabeledExample, ParameterSet, Snr};

pub use num_complex::Complex64;
