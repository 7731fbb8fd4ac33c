//! Multi-sinusoid frames: synthesis, noise, power normalization and labeled
//! dataset generation.
//!
//! Frequencies are normalized (cycles per sample, sample interval fixed at 1).
//! A frame of `N` samples is
//!
//! ```text
//! u[n] = sum_i a_i exp(j (2 pi f_i n + phi_i)),   n = 0..N-1
//! ```
//!
//! Noise is circularly symmetric complex Gaussian with total variance
//! `P / 10^(snr/10)` where `P = sum_i a_i^2`. After noise the frame is scaled to
//! unit average per-sample power (`sum |s[n]|^2 = N`), which is what an ideal
//! gain controller in front of the converter would do, and then quantized.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{param_err, QsineError, Result};
use crate::quantize::QuantizerSpec;
use crate::rng::{self, Stream};
use crate::Complex64;

/// Sample interval; frequencies are in cycles per sample.
pub const SAMPLE_INTERVAL: f64 = 1.0;

/// Rejection loops give up after this many attempts.
pub const MAX_REJECTIONS: usize = 1_000_000;

pub const AMP_RANGE: (f64, f64) = (0.1, 1.0);
/// Support of the first (offset) frequency `w_0`.
pub const FIRST_FREQ_RANGE: (f64, f64) = (0.0, 0.25);
/// Variance numerator of the spacing jitter: `w_i ~ |N(0, 2.5 / N)|`.
pub const JITTER_VARIANCE_SCALE: f64 = 2.5;

/// Amplitudes, frequencies and phases of `m` sinusoids.
///
/// Labels produced by [`draw_parameters`] are sorted by ascending frequency,
/// have frequencies in `(0, 0.5)` and phases in `[0, 2π)`. Network estimates
/// reuse this type and are only required to have consistent lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    amps: Vec<f64>,
    freqs: Vec<f64>,
    phases: Vec<f64>,
}

impl ParameterSet {
    pub fn new(amps: Vec<f64>, freqs: Vec<f64>, phases: Vec<f64>) -> Result<Self> {
        if amps.len() != freqs.len() || amps.len() != phases.len() {
            return param_err(format!(
                "parameter vectors differ in length: {} amps, {} freqs, {} phases",
                amps.len(),
                freqs.len(),
                phases.len()
            ));
        }
        Ok(Self { amps, freqs, phases })
    }

    pub fn empty() -> Self {
        Self { amps: vec![], freqs: vec![], phases: vec![] }
    }

    pub fn m(&self) -> usize {
        self.amps.len()
    }

    pub fn amps(&self) -> &[f64] {
        &self.amps
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    /// Total sinusoid power `sum a_i^2`.
    pub fn power(&self) -> f64 {
        self.amps.iter().map(|a| a * a).sum()
    }

    /// Reorders the sinusoids by ascending frequency, keeping triples together.
    pub fn sorted_by_frequency(&self) -> Self {
        let mut idx: Vec<usize> = (0..self.m()).collect();
        idx.sort_by(|&i, &j| self.freqs[i].total_cmp(&self.freqs[j]));
        Self {
            amps: idx.iter().map(|&i| self.amps[i]).collect(),
            freqs: idx.iter().map(|&i| self.freqs[i]).collect(),
            phases: idx.iter().map(|&i| self.phases[i]).collect(),
        }
    }

    /// Checks the label invariants: ascending frequencies in `(0, 0.5)` and
    /// phases in `[0, 2π)`.
    pub fn check_label(&self) -> Result<()> {
        if self.freqs.windows(2).any(|w| !(w[0] < w[1])) {
            return param_err("frequencies are not strictly ascending");
        }
        if self.freqs.iter().any(|&f| !(f > 0.0 && f < 0.5)) {
            return param_err("frequency outside (0, 0.5)");
        }
        if self.phases.iter().any(|&p| !(0.0..TAU).contains(&p)) {
            return param_err("phase outside [0, 2pi)");
        }
        Ok(())
    }
}

/// `N` complex samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexFrame {
    samples: Vec<Complex64>,
}

impl ComplexFrame {
    pub fn new(samples: Vec<Complex64>) -> Result<Self> {
        if samples.is_empty() {
            return param_err("frame must contain at least one sample");
        }
        if samples.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(QsineError::Input("frame contains non-finite samples".into()));
        }
        Ok(Self { samples })
    }

    pub(crate) fn from_samples_unchecked(samples: Vec<Complex64>) -> Self {
        Self { samples }
    }

    pub fn zeros(n: usize) -> Self {
        Self { samples: vec![Complex64::new(0.0, 0.0); n] }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Complex64> {
        self.samples
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { samples: self.samples.iter().map(|z| z * c).collect() }
    }

    /// Applies a common phase rotation `e^{j theta}`.
    pub fn rotate(&self, theta: f64) -> Self {
        let r = Complex64::from_polar(1.0, theta);
        Self { samples: self.samples.iter().map(|z| z * r).collect() }
    }
}

/// Real `N x 2` matrix: column 0 holds real parts, column 1 imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct IqFrame {
    data: Vec<f64>,
}

impl IqFrame {
    /// Builds from row-major `[re0, im0, re1, im1, ...]`.
    pub fn from_interleaved(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() || data.len() % 2 != 0 {
            return param_err(format!("IQ data length {} is not a positive multiple of 2", data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(QsineError::Input("IQ frame contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[(f64, f64)]) -> Result<Self> {
        Self::from_interleaved(rows.iter().flat_map(|&(re, im)| [re, im]).collect())
    }

    pub fn n(&self) -> usize {
        self.data.len() / 2
    }

    /// Row-major interleaved storage.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[2 * row + col]
    }

    pub fn rows(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.data.chunks_exact(2).map(|c| (c[0], c[1]))
    }

    /// Recombines the two columns into complex samples.
    pub fn to_complex(&self) -> ComplexFrame {
        ComplexFrame::from_samples_unchecked(
            self.rows().map(|(re, im)| Complex64::new(re, im)).collect(),
        )
    }
}

/// Vectorizes a complex frame into its `N x 2` real form.
pub fn to_iq(frame: &ComplexFrame) -> IqFrame {
    IqFrame { data: frame.samples.iter().flat_map(|z| [z.re, z.im]).collect() }
}

/// Noiseless sum of sinusoids over `n` samples.
pub fn synthesize(params: &ParameterSet, n: usize) -> Result<ComplexFrame> {
    if n == 0 {
        return param_err("frame length must be at least 1");
    }
    let mut samples = vec![Complex64::new(0.0, 0.0); n];
    for ((&a, &f), &phi) in params.amps.iter().zip(&params.freqs).zip(&params.phases) {
        for (k, s) in samples.iter_mut().enumerate() {
            *s += Complex64::from_polar(a, TAU * f * k as f64 * SAMPLE_INTERVAL + phi);
        }
    }
    Ok(ComplexFrame { samples })
}

/// Noise variance `signal_power / 10^(snr_db / 10)`.
pub fn noise_variance(snr_db: f64, signal_power: f64) -> f64 {
    signal_power / 10f64.powf(snr_db / 10.0)
}

/// Adds circularly symmetric complex Gaussian noise. `snr_db = +∞` means
/// noiseless and returns the frame unchanged.
pub fn add_noise(
    frame: &ComplexFrame,
    snr_db: f64,
    signal_power: f64,
    rng: &mut impl Rng,
) -> Result<ComplexFrame> {
    if snr_db == f64::INFINITY {
        return Ok(frame.clone());
    }
    if !snr_db.is_finite() {
        return param_err(format!("snr_db must be finite or +inf, got {snr_db}"));
    }
    if !(signal_power > 0.0) {
        return param_err(format!("signal power must be positive, got {signal_power}"));
    }
    let component_sd = (0.5 * noise_variance(snr_db, signal_power)).sqrt();
    let samples = frame
        .samples
        .iter()
        .map(|z| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            z + Complex64::new(re, im) * component_sd
        })
        .collect();
    Ok(ComplexFrame { samples })
}

/// Scales to unit average per-sample power: `s = sqrt(N) u / ||u||`.
pub fn normalize_power(frame: &ComplexFrame) -> Result<ComplexFrame> {
    let energy = frame.energy();
    if !(energy > 0.0) {
        return Err(QsineError::DegenerateInput("cannot normalize an all-zero frame".into()));
    }
    let scale = (frame.len() as f64).sqrt() / energy.sqrt();
    Ok(frame.scale(scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FreqMode {
    /// Offset plus folded-normal spacing jitter, as used for training.
    #[default]
    InDistribution,
    /// Uniform draws on the same per-position support, at least `1/N` apart.
    OodUniform,
}

/// Per-example signal-to-noise ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Fixed(f64),
    /// Drawn uniformly from `[min, max]` for every example.
    Uniform { min: f64, max: f64 },
}

impl Snr {
    fn draw(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            Snr::Fixed(db) => db,
            Snr::Uniform { min, max } if min == max => min,
            Snr::Uniform { min, max } => rng.random_range(min..=max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    /// Frame length N.
    pub n: usize,
    /// Largest sinusoid count M.
    pub m_max: usize,
    /// When set, every example has exactly this many sinusoids.
    pub fixed_m: Option<usize>,
    pub snr: Snr,
    pub bits: u32,
    pub seed: u64,
    pub freq_mode: FreqMode,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n: 64,
            m_max: 5,
            fixed_m: None,
            snr: Snr::Fixed(10.0),
            bits: 3,
            seed: 0,
            freq_mode: FreqMode::InDistribution,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return param_err(format!("N must be at least 2, got {}", self.n));
        }
        if self.m_max < 1 {
            return param_err("M must be at least 1");
        }
        if let Some(m) = self.fixed_m {
            if m < 1 || m > self.m_max {
                return param_err(format!("fixed m = {m} outside 1..={}", self.m_max));
            }
        }
        if self.bits < 1 {
            return param_err("bits must be at least 1");
        }
        match self.snr {
            Snr::Fixed(db) if db.is_nan() || db == f64::NEG_INFINITY => {
                return param_err("SNR must not be NaN or -inf")
            }
            Snr::Uniform { min, max } if !(min.is_finite() && max.is_finite() && min <= max) => {
                return param_err("SNR range must be finite with min <= max")
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub x: IqFrame,
    pub label: ParameterSet,
    pub snr_db: f64,
}

/// Frequencies of one in-distribution draw, in generation order
/// (`f_1 = w_0`, `f_{i+1} = w_0 + i/N + w_i`), after the max-frequency
/// rejection. Not necessarily ascending: the jitter terms are independent.
pub fn draw_in_distribution_frequencies(m: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let jitter = Normal::new(0.0, (JITTER_VARIANCE_SCALE / n as f64).sqrt())
        .map_err(|e| QsineError::Parameter(e.to_string()))?;
    let mut freqs = vec![0.0; m];
    for _ in 0..MAX_REJECTIONS {
        let w0 = rng.random_range(FIRST_FREQ_RANGE.0..FIRST_FREQ_RANGE.1);
        freqs[0] = w0;
        for (i, f) in freqs.iter_mut().enumerate().skip(1) {
            let w: f64 = jitter.sample(rng);
            *f = w0 + i as f64 / n as f64 + w.abs();
        }
        let max = freqs.iter().copied().fold(f64::MIN, f64::max);
        if max < 0.5 && w0 > 0.0 {
            return Ok(freqs);
        }
    }
    Err(QsineError::Sampling(format!(
        "no admissible frequency set for m = {m} after {MAX_REJECTIONS} draws"
    )))
}

/// Uniform frequencies on the per-position support of the in-distribution
/// generator (`(0, 0.25)` for the first, `((i-1)/N, 0.5)` for the i-th),
/// regenerated wholesale until every pair is at least `1/N` apart.
pub fn draw_ood_frequencies(m: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let min_gap = 1.0 / n as f64;
    let mut freqs = vec![0.0; m];
    for _ in 0..MAX_REJECTIONS {
        for (i, f) in freqs.iter_mut().enumerate() {
            let lo = if i == 0 { FIRST_FREQ_RANGE.0 } else { i as f64 / n as f64 };
            let hi = if i == 0 { FIRST_FREQ_RANGE.1 } else { 0.5 };
            *f = rng.random_range(lo..hi);
        }
        let mut sorted = freqs.clone();
        sorted.sort_by(f64::total_cmp);
        let spaced = sorted.windows(2).all(|w| w[1] - w[0] >= min_gap);
        if spaced && sorted[0] > 0.0 {
            return Ok(freqs);
        }
    }
    Err(QsineError::Sampling(format!(
        "no admissible OOD frequency set for m = {m} after {MAX_REJECTIONS} draws"
    )))
}

/// Draws one label: count, frequencies, then amplitudes and phases.
pub fn draw_parameters(cfg: &GenConfig, rng: &mut impl Rng) -> Result<ParameterSet> {
    cfg.validate()?;
    let m = match cfg.fixed_m {
        Some(m) => m,
        None => rng.random_range(1..=cfg.m_max),
    };
    let freqs = match cfg.freq_mode {
        FreqMode::InDistribution => draw_in_distribution_frequencies(m, cfg.n, rng)?,
        FreqMode::OodUniform => draw_ood_frequencies(m, cfg.n, rng)?,
    };
    let amps = (0..m).map(|_| rng.random_range(AMP_RANGE.0..AMP_RANGE.1)).collect();
    let phases = (0..m).map(|_| rng.random_range(0.0..TAU)).collect();
    Ok(ParameterSet { amps, freqs, phases }.sorted_by_frequency())
}

/// Noise, normalization and (optionally) quantization of a labeled signal.
/// `quantizer = None` leaves the normalized frame unquantized.
pub fn observe(
    params: &ParameterSet,
    n: usize,
    snr_db: f64,
    quantizer: Option<&QuantizerSpec>,
    rng: &mut impl Rng,
) -> Result<IqFrame> {
    let u = synthesize(params, n)?;
    let y = add_noise(&u, snr_db, params.power(), rng)?;
    let s = normalize_power(&y)?;
    let z = match quantizer {
        Some(q) => q.quantize(&s)?,
        None => s,
    };
    Ok(to_iq(&z))
}

/// Generates example `index` of the dataset described by `cfg` from its own
/// substream.
pub fn make_example(cfg: &GenConfig, quantizer: &QuantizerSpec, index: u64) -> Result<LabeledExample> {
    let mut rng: Stream = rng::substream(cfg.seed, rng::tag::EXAMPLE, index);
    let label = draw_parameters(cfg, &mut rng)?;
    let snr_db = cfg.snr.draw(&mut rng);
    let x = observe(&label, cfg.n, snr_db, Some(quantizer), &mut rng)?;
    Ok(LabeledExample { x, label, snr_db })
}

/// Generates `count` examples. Each example uses the substream
/// `(cfg.seed, index)`, so the output does not depend on the worker count.
pub fn make_dataset(cfg: &GenConfig, count: usize) -> Result<Vec<LabeledExample>> {
    cfg.validate()?;
    if count < 1 {
        return param_err("dataset count must be at least 1");
    }
    let quantizer = QuantizerSpec::new(cfg.bits)?;
    (0..count as u64)
        .into_par_iter()
        .map(|i| make_example(cfg, &quantizer, i))
        .collect()
}

/// Wraps a phase into `[0, 2π)`.
pub fn wrap_phase(phi: f64) -> f64 {
    let w = phi.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}
