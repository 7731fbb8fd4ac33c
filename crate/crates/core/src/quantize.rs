//! Uniform b-bit complex quantizer and its Bussgang linearization.
//!
//! The quantizer has `2^b` levels spread uniformly over `[-1, 1]` (both
//! endpoints included) and `2^b - 1` decision thresholds at the level
//! midpoints. The outermost bins extend to `±∞`, so large inputs saturate.
//! Bins are right-closed: an input sitting exactly on a threshold maps to the
//! lower level. Real and imaginary parts are quantized independently.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{param_err, QsineError, Result};
use crate::signal::{ComplexFrame, IqFrame};
use crate::Complex64;

/// Largest supported resolution. 2^16 levels is far beyond anything the
/// low-resolution setting needs and keeps the level table small.
pub const MAX_BITS: u32 = 16;

/// Per-component standard deviation of a power-normalized frame
/// (unit average complex power split over two components).
pub const NORMALIZED_COMPONENT_SIGMA: f64 = FRAC_1_SQRT_2;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerSpec {
    bits: u32,
    levels: Vec<f64>,
    thresholds: Vec<f64>,
}

impl QuantizerSpec {
    /// Builds the uniform quantizer with `levels[i] = -1 + 2i / (2^b - 1)`.
    pub fn new(bits: u32) -> Result<Self> {
        if bits < 1 || bits > MAX_BITS {
            return param_err(format!("bits must be in 1..={MAX_BITS}, got {bits}"));
        }
        let count = 1usize << bits;
        let span = (count - 1) as f64;
        // (2i - span) / span rounds symmetrically, so levels are exactly odd
        let levels: Vec<f64> = (0..count).map(|i| (2.0 * i as f64 - span) / span).collect();
        let thresholds = levels.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        Ok(Self { bits, levels, thresholds })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// Quantizes one real value. Non-finite input is rejected.
    pub fn quantize_real(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(QsineError::Input(format!("cannot quantize non-finite value {x}")));
        }
        // number of thresholds strictly below x == bin index (right-closed bins)
        let k = self.thresholds.partition_point(|&t| t < x);
        Ok(self.levels[k])
    }

    pub fn quantize_complex(&self, z: Complex64) -> Result<Complex64> {
        Ok(Complex64::new(self.quantize_real(z.re)?, self.quantize_real(z.im)?))
    }

    /// Quantizes every sample of a frame.
    pub fn quantize(&self, frame: &ComplexFrame) -> Result<ComplexFrame> {
        let samples = frame
            .samples()
            .iter()
            .map(|&z| self.quantize_complex(z))
            .collect::<Result<Vec<_>>>()?;
        ComplexFrame::new(samples)
    }

    /// Bussgang gain `G = E[x Q(x)] / E[x^2]` for `x ~ N(0, sigma^2)`.
    ///
    /// `E[x Q(x)] = sigma * sum_k levels[k] * (pdf(t_{k-1}/sigma) - pdf(t_k/sigma))`
    /// with the outer thresholds at `∓∞`.
    pub fn bussgang_gain(&self, sigma: f64) -> Result<f64> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return param_err(format!("sigma must be positive and finite, got {sigma}"));
        }
        let pdf_at = |k: isize| -> f64 {
            // density at the k-th threshold; k = -1 and k = len are the infinite edges
            if k < 0 || k as usize >= self.thresholds.len() {
                0.0
            } else {
                standard_normal_pdf(self.thresholds[k as usize] / sigma)
            }
        };
        let cross: f64 = self
            .levels
            .iter()
            .enumerate()
            .map(|(k, &level)| level * (pdf_at(k as isize - 1) - pdf_at(k as isize)))
            .sum::<f64>()
            * sigma;
        Ok(cross / (sigma * sigma))
    }

    /// Gain at the per-component spread guaranteed by power normalization.
    pub fn normalized_gain(&self) -> f64 {
        self.bussgang_gain(NORMALIZED_COMPONENT_SIGMA)
            .expect("normalized sigma is positive")
    }

    /// Linearized recovery `G^-1 (X[:,0] + j X[:,1])` of a quantized frame.
    pub fn linearize(&self, x: &IqFrame) -> ComplexFrame {
        linearize_with_gain(x, self.normalized_gain())
    }
}

/// Convenience alias matching the free-function style used elsewhere.
pub fn make_quantizer(bits: u32) -> Result<QuantizerSpec> {
    QuantizerSpec::new(bits)
}

/// Divides an IQ frame by a scalar Bussgang gain.
pub fn linearize_with_gain(x: &IqFrame, gain: f64) -> ComplexFrame {
    let inv = 1.0 / gain;
    let samples = x.rows().map(|(re, im)| Complex64::new(re * inv, im * inv)).collect();
    ComplexFrame::from_samples_unchecked(samples)
}

fn standard_normal_pdf(z: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}
