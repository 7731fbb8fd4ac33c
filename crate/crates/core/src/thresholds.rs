//! Learning thresholds: the expected loss of the best input-independent
//! estimator for each task under the data-generating distribution.
//!
//! A network whose loss sits at its threshold has learned the label
//! distribution and nothing about the input.

use std::f64::consts::{E, PI};

use crate::error::{param_err, QsineError, Result};
use crate::metrics::{detection_loss, LossVector};

const LAMBERT_MAX_ITER: usize = 64;

/// Principal branch `W_0(x)` of the Lambert W function, `W e^W = x`, for
/// `x >= -1/e`.
///
/// Starts from the branch-point series near `-1/e`, `ln(1 + x)` for moderate
/// arguments and `ln x - ln ln x` for large ones, then runs Halley's iteration.
pub fn lambert_w(x: f64) -> Result<f64> {
    let branch_point = -1.0 / E;
    if x.is_nan() || x < branch_point {
        return Err(QsineError::Domain(format!("lambert_w undefined below -1/e, got {x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == branch_point {
        return Ok(-1.0);
    }
    if x.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let mut w = if x < -0.25 {
        let p = (2.0 * (E * x + 1.0)).sqrt();
        -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p
    } else if x < 3.0 {
        x.ln_1p()
    } else {
        let l = x.ln();
        l - l.ln()
    };
    for _ in 0..LAMBERT_MAX_ITER {
        let ew = w.exp();
        let f = w * ew - x;
        let wp1 = w + 1.0;
        let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
        let step = f / denom;
        w -= step;
        if step.abs() <= 1e-15 * (1.0 + w.abs()) {
            break;
        }
    }
    Ok(w)
}

/// Best constant count estimate and its expected detection loss for counts
/// uniform on `1..=m_max`.
///
/// On a bracket `(c, c+1]` the stationarity condition of the mean loss reduces
/// to `(mhat - alpha) e^(mhat - alpha) = (1/c) sum_{m=c+1}^{M} e^(m - alpha)`
/// with `alpha = (c + 1) / 2`, so `mhat = W(.) + alpha`. The mean loss is
/// convex, so clamping each bracket's stationary point into `[c, c+1]` gives
/// that bracket's minimum and the best bracket gives the global one. The loss
/// is evaluated at the fractional estimate.
pub fn detection_threshold(m_max: usize) -> Result<(f64, f64)> {
    if m_max < 1 {
        return param_err("M must be at least 1");
    }
    if m_max == 1 {
        return Ok((1.0, 0.0));
    }
    let mut best = (f64::NAN, f64::INFINITY);
    for c in 1..m_max {
        let alpha = (c as f64 + 1.0) / 2.0;
        let rhs: f64 =
            ((c + 1)..=m_max).map(|m| (m as f64 - alpha).exp()).sum::<f64>() / c as f64;
        let mhat = (lambert_w(rhs)? + alpha).clamp(c as f64, c as f64 + 1.0);
        let loss = mean_detection_loss(m_max, mhat);
        if loss < best.1 {
            best = (mhat, loss);
        }
    }
    Ok(best)
}

/// Mean detection loss of the constant estimate `mhat` over `m ~ U{1..M}`.
pub fn mean_detection_loss(m_max: usize, mhat: f64) -> f64 {
    (1..=m_max).map(|m| detection_loss(m as f64, mhat)).sum::<f64>() / m_max as f64
}

/// Variance term charged to every frequency slot, kept at the published
/// `1/64` so the threshold curve matches the reported dB values.
pub const FREQ_BASE_VARIANCE: f64 = 1.0 / 64.0;

/// Frequency threshold (linear MSE) for `m` sinusoids in `n`-sample frames:
/// `1/64 + (1 - 1/m) (5 / 2N) (1 - 2/pi)`.
pub fn frequency_threshold(m: usize, n: usize) -> Result<f64> {
    if m < 1 || n < 2 {
        return param_err(format!("need m >= 1 and N >= 2, got m = {m}, N = {n}"));
    }
    let jitter_var = 5.0 / (2.0 * n as f64) * (1.0 - 2.0 / PI);
    Ok(FREQ_BASE_VARIANCE + (1.0 - 1.0 / m as f64) * jitter_var)
}

/// `(mean, variance)` of `U(0.1, 1.0)` amplitudes.
pub fn amplitude_threshold() -> (f64, f64) {
    let (lo, hi) = crate::signal::AMP_RANGE;
    (0.5 * (lo + hi), (hi - lo) * (hi - lo) / 12.0)
}

/// `(mean, variance)` of `U(0, 2pi)` phases: `(pi, pi^2 / 3)`.
pub fn phase_threshold() -> (f64, f64) {
    (PI, PI * PI / 3.0)
}

/// Constant frequency estimator: entry `i` (1-based) is
/// `0.125 + (i-1)/N + [i > 1] sqrt(5 / (N pi))`.
pub fn mean_frequency_estimator(m: usize, n: usize) -> Result<Vec<f64>> {
    if m < 1 || n < 1 {
        return param_err("need m >= 1 and N >= 1");
    }
    let jitter_mean = (5.0 / (n as f64 * PI)).sqrt();
    Ok((0..m)
        .map(|i| 0.125 + i as f64 / n as f64 + if i > 0 { jitter_mean } else { 0.0 })
        .collect())
}

/// All thresholds for a given `(M, N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSet {
    pub m_max: usize,
    pub n: usize,
    pub detection_estimator: f64,
    pub detection_loss_value: f64,
    /// Indexed by `m - 1`.
    pub freq_thresholds: Vec<f64>,
    pub amp_threshold: f64,
    pub phase_threshold: f64,
    pub mean_amp: f64,
    pub mean_phase: f64,
    /// Constant frequency estimator per `m`, indexed by `m - 1`.
    pub mean_freq_vectors: Vec<Vec<f64>>,
}

impl ThresholdSet {
    pub fn compute(m_max: usize, n: usize) -> Result<Self> {
        let (detection_estimator, detection_loss_value) = detection_threshold(m_max)?;
        let freq_thresholds =
            (1..=m_max).map(|m| frequency_threshold(m, n)).collect::<Result<Vec<_>>>()?;
        let mean_freq_vectors =
            (1..=m_max).map(|m| mean_frequency_estimator(m, n)).collect::<Result<Vec<_>>>()?;
        let (mean_amp, amp_threshold) = amplitude_threshold();
        let (mean_phase, phase_threshold) = phase_threshold();
        Ok(Self {
            m_max,
            n,
            detection_estimator,
            detection_loss_value,
            freq_thresholds,
            amp_threshold,
            phase_threshold,
            mean_amp,
            mean_phase,
            mean_freq_vectors,
        })
    }

    /// Per-parameter thresholds for `m` sinusoids, used to normalize losses.
    pub fn loss_vector(&self, m: usize) -> Result<LossVector> {
        if m < 1 || m > self.m_max {
            return param_err(format!("m = {m} outside 1..={}", self.m_max));
        }
        Ok(LossVector::new(self.amp_threshold, self.freq_thresholds[m - 1], self.phase_threshold))
    }
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambert_w_special_values() {
        assert_eq!(lambert_w(0.0).unwrap(), 0.0);
        assert!((lambert_w(E).unwrap() - 1.0).abs() < 1e-14);
        assert!((lambert_w(-1.0 / E).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(lambert_w(-0.5), Err(QsineError::Domain(_))));
    }

    /// Plain Newton iteration on `w e^w - 1` as an independent oracle.
    #[test]
    fn lambert_w_of_one_matches_newton() {
        let mut w = 0.5f64;
        for _ in 0..50 {
            w -= (w * w.exp() - 1.0) / (w.exp() * (w + 1.0));
        }
        assert!((w - 0.567_143_3).abs() < 1e-7);
        assert!((lambert_w(1.0).unwrap() - w).abs() < 1e-14);
    }

    #[test]
    fn lambert_w_residuals() {
        for x in [0.01, 0.1, 1.0, 10.0, 100.0, -0.3, -0.36, 1e6] {
            let w = lambert_w(x).unwrap();
            let tol = 1e-12 * x.abs().max(1.0);
            assert!((w * w.exp() - x).abs() <= tol, "x={x} w={w}");
        }
    }

    #[test]
    fn detection_threshold_m5() {
        let (mhat, loss) = detection_threshold(5).unwrap();
        assert!((mhat - 3.69).abs() < 0.01, "{mhat}");
        assert!((loss - 1.67).abs() < 0.01, "{loss}");
    }

    #[test]
    fn detection_threshold_degenerate_and_small() {
        assert_eq!(detection_threshold(1).unwrap(), (1.0, 0.0));
        let (mhat, loss) = detection_threshold(2).unwrap();
        assert!((mhat - 2.0).abs() < 1e-12, "{mhat}");
        assert!((loss - 0.25).abs() < 1e-12, "{loss}");
        assert!(detection_threshold(0).is_err());
    }

    /// Brute-force grid search over the constant estimate.
    fn grid_minimum(m_max: usize, points: usize) -> (f64, f64) {
        (0..points)
            .map(|i| 1.0 + (m_max as f64 - 1.0) * i as f64 / (points - 1) as f64)
            .map(|g| (g, mean_detection_loss(m_max, g)))
            .fold((0.0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
    }

    #[test]
    fn detection_threshold_is_grid_minimizer() {
        for m_max in 2..=12 {
            let (mhat, loss) = detection_threshold(m_max).unwrap();
            for i in 0..50 {
                let g = 1.0 + (m_max as f64 - 1.0) * i as f64 / 49.0;
                assert!(loss <= mean_detection_loss(m_max, g) + 1e-12, "M={m_max} g={g}");
            }
            let (_, fine) = grid_minimum(m_max, 200_001);
            // grid misses a kink minimum by at most slope * step
            assert!(loss <= fine + 1e-12 && fine - loss < 1e-5, "M={m_max}: {loss} vs {fine}");
            assert!(mhat >= 1.0 && mhat <= m_max as f64);
        }
        let (g, _) = grid_minimum(2, 100_001);
        assert!((g - 2.0).abs() < 1e-4);
    }

    #[test]
    fn frequency_thresholds_n64() {
        let want_db = [-18.06, -16.44, -16.01, -15.81, -15.69];
        let want_lin = [0.015625, 0.022_721_8, 0.025_088_0, 0.026_270_9, 0.026_980_3];
        for m in 1..=5 {
            let t = frequency_threshold(m, 64).unwrap();
            assert!((t - want_lin[m - 1]).abs() < 1e-6, "m={m}: {t}");
            assert!((to_db(t) - want_db[m - 1]).abs() < 0.01, "m={m}: {}", to_db(t));
        }
    }

    #[test]
    fn frequency_threshold_single_tone_is_base_term() {
        for n in [2, 16, 64, 1024] {
            assert_eq!(frequency_threshold(1, n).unwrap(), 1.0 / 64.0);
        }
    }

    #[test]
    fn frequency_thresholds_nondecreasing() {
        let t = ThresholdSet::compute(5, 64).unwrap();
        assert!(t.freq_thresholds.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn amplitude_and_phase_thresholds() {
        let (mean, var) = amplitude_threshold();
        assert!((mean - 0.55).abs() < 1e-15);
        assert!((var - 0.0675).abs() < 1e-15);
        let (pm, pv) = phase_threshold();
        assert_eq!(pm, PI);
        assert!((pv - 3.289_868_133_696_453).abs() < 1e-15);
    }

    #[test]
    fn mean_frequency_vectors() {
        assert_eq!(mean_frequency_estimator(1, 64).unwrap(), vec![0.125]);
        let v = mean_frequency_estimator(2, 64).unwrap();
        assert!((v[1] - 0.298_32).abs() < 1e-5, "{v:?}");
        for m in 1..=5 {
            let v = mean_frequency_estimator(m, 64).unwrap();
            assert!(v.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn loss_vector_bounds() {
        let t = ThresholdSet::compute(5, 64).unwrap();
        assert!(t.loss_vector(0).is_err());
        assert!(t.loss_vector(6).is_err());
        assert_eq!(t.loss_vector(1).unwrap().freq, 1.0 / 64.0);
    }
}
