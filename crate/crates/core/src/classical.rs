//! Classical baselines run on Bussgang-linearized frames: zero-padded
//! periodogram estimation of amplitude/frequency/phase and eigenvalue-based
//! AIC/MDL model-order selection.

use std::cell::RefCell;

use nalgebra::{DMatrix, SymmetricEigen};
use rustfft::FftPlanner;

use crate::error::{param_err, QsineError, Result};
use crate::quantize::QuantizerSpec;
use crate::signal::{wrap_phase, ComplexFrame, IqFrame, ParameterSet};
use crate::Complex64;

/// Transform length used for the periodogram baseline.
pub const DEFAULT_NFFT: usize = 1 << 16;
/// Default sliding-window length for AIC/MDL (N/4 for N = 64).
pub const DEFAULT_SUBVECTOR_LEN: usize = 16;
const EIGEN_FLOOR: f64 = 1e-12;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumEstimate {
    pub nfft: usize,
    pub values: Vec<Complex64>,
    pub magnitudes: Vec<f64>,
}

/// DFT of `x` zero-padded to `nfft` points; bin `k` is frequency `k / nfft`.
pub fn zero_padded_dft(x: &ComplexFrame, nfft: usize) -> Result<SpectrumEstimate> {
    if nfft < x.len() {
        return param_err(format!("nfft = {nfft} shorter than frame length {}", x.len()));
    }
    if !nfft.is_power_of_two() {
        return param_err(format!("nfft = {nfft} is not a power of two"));
    }
    let mut values = vec![Complex64::new(0.0, 0.0); nfft];
    values[..x.len()].copy_from_slice(x.samples());
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(nfft)).process(&mut values);
    let magnitudes = values.iter().map(|v| v.norm()).collect();
    Ok(SpectrumEstimate { nfft, values, magnitudes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PeakMode {
    /// Local maxima, largest first, each excluding `±ceil(nfft / 2N)` bins.
    #[default]
    Guarded,
    /// The `m` largest magnitudes in the band, adjacent bins allowed.
    TopMagnitude,
}

impl std::str::FromStr for PeakMode {
    type Err = QsineError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "guarded" => Ok(PeakMode::Guarded),
            "top" => Ok(PeakMode::TopMagnitude),
            other => param_err(format!("unknown peak mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakPick {
    /// Selected bins, ascending.
    pub bins: Vec<usize>,
    /// True when fewer than `m` guarded local maxima existed and the pick was
    /// padded with the largest remaining bins.
    pub degraded: bool,
}

/// Exclusion half-width around a selected peak.
pub fn peak_guard(nfft: usize, n: usize) -> usize {
    nfft.div_ceil(2 * n)
}

/// Picks `m` peaks among bins with normalized frequency in `(0, 0.5)`.
pub fn pick_peaks(spec: &SpectrumEstimate, m: usize, n: usize, mode: PeakMode) -> Result<PeakPick> {
    if m < 1 {
        return param_err("need at least one peak");
    }
    if n < 1 {
        return param_err("frame length must be positive");
    }
    let mags = &spec.magnitudes;
    let band_end = spec.nfft / 2; // exclusive: k / nfft < 0.5
    let band = 1..band_end;
    if band.len() < m {
        return param_err(format!("band holds {} bins, fewer than m = {m}", band.len()));
    }
    let by_magnitude = |bins: &mut Vec<usize>| {
        bins.sort_by(|&a, &b| mags[b].total_cmp(&mags[a]).then(a.cmp(&b)));
    };

    let mut selected: Vec<usize> = Vec::with_capacity(m);
    let mut degraded = false;
    match mode {
        PeakMode::TopMagnitude => {
            let mut bins: Vec<usize> = band.collect();
            by_magnitude(&mut bins);
            selected.extend(bins.into_iter().take(m));
        }
        PeakMode::Guarded => {
            let guard = peak_guard(spec.nfft, n);
            let far = |sel: &[usize], k: usize| sel.iter().all(|&s| s.abs_diff(k) >= guard);
            let mut maxima: Vec<usize> = band
                .clone()
                .filter(|&k| mags[k] >= mags[k - 1] && mags[k] > mags[(k + 1) % spec.nfft])
                .collect();
            by_magnitude(&mut maxima);
            for k in maxima {
                if selected.len() == m {
                    break;
                }
                if far(&selected, k) {
                    selected.push(k);
                }
            }
            if selected.len() < m {
                degraded = true;
                let mut rest: Vec<usize> = band.clone().filter(|k| !selected.contains(k)).collect();
                by_magnitude(&mut rest);
                for &k in &rest {
                    if selected.len() == m {
                        break;
                    }
                    if far(&selected, k) {
                        selected.push(k);
                    }
                }
                // band too narrow for the guard: drop it
                for &k in &rest {
                    if selected.len() == m {
                        break;
                    }
                    if !selected.contains(&k) {
                        selected.push(k);
                    }
                }
            }
        }
    }
    selected.sort_unstable();
    Ok(PeakPick { bins: selected, degraded })
}

/// Options for [`classical_estimate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodogramOptions {
    pub nfft: usize,
    pub peak_mode: PeakMode,
}

impl Default for PeriodogramOptions {
    fn default() -> Self {
        Self { nfft: DEFAULT_NFFT, peak_mode: PeakMode::Guarded }
    }
}

/// Undoes the quantizer gain when a quantizer is given; otherwise the frame is
/// used as-is.
fn linearized(x: &IqFrame, qspec: Option<&QuantizerSpec>) -> ComplexFrame {
    match qspec {
        Some(q) => q.linearize(x),
        None => x.to_complex(),
    }
}

/// Periodogram estimate of `m` sinusoids: `f = p / nfft`, `a = |r[p]| / N`,
/// `phi = atan2(Im r[p], Re r[p])` wrapped into `[0, 2pi)`. Sorted by
/// ascending frequency.
pub fn classical_estimate(
    x: &IqFrame,
    m: usize,
    qspec: Option<&QuantizerSpec>,
    opts: PeriodogramOptions,
) -> Result<ParameterSet> {
    let xt = linearized(x, qspec);
    let n = xt.len();
    let spec = zero_padded_dft(&xt, opts.nfft)?;
    let pick = pick_peaks(&spec, m, n, opts.peak_mode)?;
    let mut amps = Vec::with_capacity(m);
    let mut freqs = Vec::with_capacity(m);
    let mut phases = Vec::with_capacity(m);
    for &p in &pick.bins {
        let r = spec.values[p];
        freqs.push(p as f64 / opts.nfft as f64);
        amps.push(r.norm() / n as f64);
        phases.push(wrap_phase(r.im.atan2(r.re)));
    }
    ParameterSet::new(amps, freqs, phases)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    Aic,
    Mdl,
}

impl std::str::FromStr for Criterion {
    type Err = QsineError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aic" => Ok(Criterion::Aic),
            "mdl" => Ok(Criterion::Mdl),
            other => param_err(format!("unknown criterion '{other}'")),
        }
    }
}

/// Eigenvalues (descending) of the sample covariance of the `K = N - L + 1`
/// overlapping length-`L` windows of `x`.
pub fn window_covariance_eigenvalues(x: &ComplexFrame, l: usize) -> Result<Vec<f64>> {
    let n = x.len();
    if l < 1 || l > n {
        return param_err(format!("subvector length {l} outside 1..={n}"));
    }
    let k = n - l + 1;
    let s = x.samples();
    let mut r = DMatrix::<Complex64>::zeros(l, l);
    for t in 0..k {
        let w = &s[t..t + l];
        for i in 0..l {
            for j in 0..l {
                r[(i, j)] += w[i] * w[j].conj();
            }
        }
    }
    r /= Complex64::new(k as f64, 0.0);
    let mut eig: Vec<f64> = SymmetricEigen::new(r).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(eig)
}

/// Criterion value for `k` signals given descending eigenvalues and `K`
/// snapshots.
pub fn information_criterion(eig: &[f64], k: usize, snapshots: usize, criterion: Criterion) -> f64 {
    let l = eig.len();
    let tail = &eig[k..];
    let q = (l - k) as f64;
    let clamped = tail.iter().map(|&v| v.max(EIGEN_FLOOR));
    let log_geo = clamped.clone().map(f64::ln).sum::<f64>() / q;
    let arith = clamped.sum::<f64>() / q;
    let log_ratio = log_geo - arith.ln();
    let kk = snapshots as f64;
    let kf = k as f64;
    let free = kf * (2.0 * l as f64 - kf);
    match criterion {
        Criterion::Aic => -2.0 * kk * q * log_ratio + 2.0 * free,
        Criterion::Mdl => -kk * q * log_ratio + 0.5 * free * kk.ln(),
    }
}

/// AIC/MDL model-order estimate on the linearized frame, clamped to `>= 1`.
pub fn aic_mdl_detect(
    x: &IqFrame,
    criterion: Criterion,
    qspec: Option<&QuantizerSpec>,
    l: usize,
    m_max: usize,
) -> Result<usize> {
    let xt = linearized(x, qspec);
    let n = xt.len();
    if l < 1 || 2 * l > n {
        return param_err(format!("subvector length {l} must satisfy 1 <= L <= N/2 (N = {n})"));
    }
    if m_max >= l {
        return param_err(format!("Mmax = {m_max} must be below L = {l}"));
    }
    let eig = window_covariance_eigenvalues(&xt, l)?;
    let snapshots = n - l + 1;
    let best = (0..=m_max)
        .map(|k| (k, information_criterion(&eig, k, snapshots, criterion)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
        .0;
    Ok(best.max(1))
}
