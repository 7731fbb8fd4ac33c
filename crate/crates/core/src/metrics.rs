//! Loss functions for training and evaluation.

use crate::error::{param_err, Result};
use crate::signal::ParameterSet;

/// Per-parameter mean squared errors (or learning thresholds, which share the
/// same units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossVector {
    pub amp: f64,
    pub freq: f64,
    pub phase: f64,
}

impl LossVector {
    pub const ZERO: LossVector = LossVector { amp: 0.0, freq: 0.0, phase: 0.0 };

    pub fn new(amp: f64, freq: f64, phase: f64) -> Self {
        Self { amp, freq, phase }
    }

    /// MSE of each parameter vector between a label and an estimate of the
    /// same count.
    pub fn between(truth: &ParameterSet, est: &ParameterSet) -> Result<Self> {
        Ok(Self {
            amp: multi_mse(truth.amps(), est.amps())?,
            freq: multi_mse(truth.freqs(), est.freqs())?,
            phase: multi_mse(truth.phases(), est.phases())?,
        })
    }

    fn check_thresholds(&self) -> Result<()> {
        if !(self.amp > 0.0 && self.freq > 0.0 && self.phase > 0.0) {
            return param_err(format!("thresholds must all be positive: {self:?}"));
        }
        Ok(())
    }
}

/// Asymmetric count loss: under-estimates cost `e^(m - mhat) - 1`,
/// over-estimates cost `(m - mhat)^2 / 2`. `mhat` may be fractional.
pub fn detection_loss(m: f64, mhat: f64) -> f64 {
    if m >= mhat {
        (m - mhat).exp() - 1.0
    } else {
        0.5 * (m - mhat) * (m - mhat)
    }
}

/// Mean over the stacked vector: `||c - chat||^2 / p`.
pub fn multi_mse(c: &[f64], chat: &[f64]) -> Result<f64> {
    if c.len() != chat.len() {
        return param_err(format!("length mismatch: {} vs {}", c.len(), chat.len()));
    }
    if c.is_empty() {
        return param_err("multi_mse needs at least one element");
    }
    Ok(c.iter().zip(chat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / c.len() as f64)
}

/// Symmetric nearest-neighbour distance between two value sets.
pub fn chamfer(f: &[f64], fhat: &[f64]) -> Result<f64> {
    if f.is_empty() || fhat.is_empty() {
        return param_err("chamfer distance needs two nonempty sets");
    }
    Ok(one_sided(f, fhat) + one_sided(fhat, f))
}

fn one_sided(from: &[f64], to: &[f64]) -> f64 {
    from.iter()
        .map(|a| to.iter().map(|b| (a - b).abs()).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Chamfer distance that tolerates an empty side by charging `2 * sum |v|`
/// of the other side.
pub fn chamfer_or_penalty(f: &[f64], fhat: &[f64]) -> f64 {
    match (f.is_empty(), fhat.is_empty()) {
        (true, true) => 0.0,
        (true, false) => 2.0 * fhat.iter().map(|v| v.abs()).sum::<f64>(),
        (false, true) => 2.0 * f.iter().map(|v| v.abs()).sum::<f64>(),
        (false, false) => one_sided(f, fhat) + one_sided(fhat, f),
    }
}

/// Threshold-normalized scalar loss
/// `(amp / thr_amp + freq / thr_freq + phase / thr_phase) / m`.
pub fn effective_loss(ell: &LossVector, thresholds: &LossVector, m: usize) -> Result<f64> {
    thresholds.check_thresholds()?;
    if m < 1 {
        return param_err("m must be at least 1");
    }
    Ok((ell.amp / thresholds.amp + ell.freq / thresholds.freq + ell.phase / thresholds.phase)
        / m as f64)
}

/// Per-parameter chamfer distances scaled by the inverse square root of the
/// learning thresholds and combined like [`effective_loss`] with the true
/// count.
pub fn normalized_chamfer(
    truth: &ParameterSet,
    est: &ParameterSet,
    thresholds: &LossVector,
) -> Result<f64> {
    thresholds.check_thresholds()?;
    if truth.m() < 1 {
        return param_err("normalized chamfer needs a nonempty ground truth");
    }
    let amp = chamfer_or_penalty(truth.amps(), est.amps());
    let freq = chamfer_or_penalty(truth.freqs(), est.freqs());
    let phase = chamfer_or_penalty(truth.phases(), est.phases());
    Ok((amp / thresholds.amp.sqrt() + freq / thresholds.freq.sqrt() + phase / thresholds.phase.sqrt())
        / truth.m() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::E;

    #[test]
    fn detection_loss_examples() {
        assert_eq!(detection_loss(3.0, 3.0), 0.0);
        assert_eq!(detection_loss(3.0, 4.0), 0.5);
        assert!((detection_loss(3.0, 2.0) - (E - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn detection_loss_ordering() {
        for m in 2..=5 {
            let m = m as f64;
            let over1 = detection_loss(m, m + 1.0);
            let under1 = detection_loss(m, m - 1.0);
            let over2 = detection_loss(m, m + 2.0);
            assert!(over1 < under1 && under1 < over2);
            assert_eq!(over1, 0.5);
            assert_eq!(over2, 2.0);
            assert!((under1 - 1.718_281_828).abs() < 1e-8);
        }
    }

    #[test]
    fn detection_loss_continuous_at_seam() {
        for m in 1..=5 {
            let m = m as f64;
            for eps in [1e-6, 1e-9] {
                assert!(detection_loss(m, m - eps).abs() < 2.0 * eps);
                assert!(detection_loss(m, m + eps).abs() < 2.0 * eps);
            }
        }
    }

    #[test]
    fn multi_mse_examples() {
        assert_eq!(multi_mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(multi_mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!((multi_mse(&[1.0, 0.0, 3.0], &[0.0, 0.0, 3.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(multi_mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn chamfer_examples() {
        assert_eq!(chamfer(&[0.1, 0.3], &[0.1, 0.3]).unwrap(), 0.0);
        assert!((chamfer(&[0.1, 0.3], &[0.2]).unwrap() - 0.3).abs() < 1e-15);
        assert!((chamfer(&[0.1], &[0.1, 0.4]).unwrap() - 0.3).abs() < 1e-15);
        assert!(chamfer(&[], &[0.1]).is_err());
    }

    #[test]
    fn chamfer_penalty_for_empty_side() {
        assert!((chamfer_or_penalty(&[0.1, -0.2], &[]) - 0.6).abs() < 1e-15);
        assert_eq!(chamfer_or_penalty(&[], &[]), 0.0);
    }

    #[test]
    fn effective_loss_examples() {
        let thr = LossVector::new(0.0675, 0.015625, 3.2899);
        assert!((effective_loss(&thr, &thr, 1).unwrap() - 3.0).abs() < 1e-15);
        assert_eq!(effective_loss(&LossVector::ZERO, &thr, 1).unwrap(), 0.0);
        assert!((effective_loss(&thr, &thr, 3).unwrap() - 1.0).abs() < 1e-15);
        assert!(effective_loss(&thr, &LossVector::new(0.0, 1.0, 1.0), 1).is_err());
        assert!(effective_loss(&thr, &LossVector::new(1.0, -1.0, 1.0), 1).is_err());
    }

    #[test]
    fn normalized_chamfer_examples() {
        let thr = LossVector::new(0.0675, 0.01, 3.2899);
        let p = ParameterSet::new(vec![0.5], vec![0.2], vec![1.0]).unwrap();
        assert_eq!(normalized_chamfer(&p, &p, &thr).unwrap(), 0.0);
        // forward + backward distance 0.05 each gives a freq chamfer of 0.1
        let q = ParameterSet::new(vec![0.5], vec![0.25], vec![1.0]).unwrap();
        let v = normalized_chamfer(&p, &q, &thr).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");

        let r = ParameterSet::new(vec![0.3], vec![0.3], vec![2.0]).unwrap();
        let s = ParameterSet::new(vec![0.1], vec![0.4], vec![3.0]).unwrap();
        let base = normalized_chamfer(&p, &r, &thr).unwrap();
        // doubling every per-parameter distance doubles the metric
        let doubled = normalized_chamfer(&p, &s, &thr).unwrap();
        assert!((doubled - 2.0 * base).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn chamfer_is_symmetric(
            a in proptest::collection::vec(-1.0f64..1.0, 1..6),
            b in proptest::collection::vec(-1.0f64..1.0, 1..6),
        ) {
            prop_assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
        }

        #[test]
        fn zero_chamfer_means_shared_support(
            a in proptest::collection::vec(-1.0f64..1.0, 1..6),
            pick in proptest::collection::vec(0usize..6, 1..6),
        ) {
            let b: Vec<f64> = pick.iter().map(|&i| a[i % a.len()]).collect();
            let d = chamfer(&a, &b).unwrap();
            let every_b_in_a = b.iter().all(|x| a.contains(x));
            let every_a_in_b = a.iter().all(|x| b.contains(x));
            prop_assert_eq!(d == 0.0, every_a_in_b && every_b_in_a);
        }

        #[test]
        fn mse_of_constant_shift(c in proptest::collection::vec(-5.0f64..5.0, 1..10), eps in 0.01f64..2.0) {
            let shifted: Vec<f64> = c.iter().map(|v| v + eps).collect();
            let mse = multi_mse(&c, &shifted).unwrap();
            prop_assert!((mse - eps * eps).abs() <= 1e-12 * eps * eps);
        }
    }
}
