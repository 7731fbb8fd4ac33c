//! Conversion of labeled frames into batched tensors.

use qsine_core::{IqFrame, LabeledExample, ParameterSet};
use qsine_nn::{Scalar, Tensor};

use crate::error::{param_err, Result};

/// Stacks IQ frames into a `[batch, N, 2]` tensor.
pub fn frames_tensor<T: Scalar>(frames: &[&IqFrame]) -> Result<Tensor<T>> {
    let Some(first) = frames.first() else {
        return param_err("no frames to stack");
    };
    let n = first.n();
    let mut data = Vec::with_capacity(frames.len() * n * 2);
    for f in frames {
        if f.n() != n {
            return param_err(format!("frame lengths differ: {n} vs {}", f.n()));
        }
        data.extend(f.data().iter().map(|&v| T::of(v)));
    }
    Ok(Tensor::new(vec![frames.len(), n, 2], data)?)
}

/// Frequency-sorted targets, row-major `[batch, m]` per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub m: usize,
    pub amps: Vec<f64>,
    pub freqs: Vec<f64>,
    pub phases: Vec<f64>,
}

impl Targets {
    pub fn from_labels(labels: &[&ParameterSet], m: usize) -> Result<Self> {
        let mut t = Targets { m, amps: Vec::new(), freqs: Vec::new(), phases: Vec::new() };
        for l in labels {
            if l.m() != m {
                return param_err(format!("label has {} sinusoids, expected {m}", l.m()));
            }
            let s = l.sorted_by_frequency();
            t.amps.extend_from_slice(s.amps());
            t.freqs.extend_from_slice(s.freqs());
            t.phases.extend_from_slice(s.phases());
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.amps.len() / self.m.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.amps.is_empty()
    }

    pub fn gather(&self, rows: &[usize]) -> Targets {
        let pick = |v: &[f64]| rows.iter().flat_map(|&r| v[r * self.m..(r + 1) * self.m].iter().copied()).collect();
        Targets { m: self.m, amps: pick(&self.amps), freqs: pick(&self.freqs), phases: pick(&self.phases) }
    }

    /// Label of row `r`.
    pub fn row(&self, r: usize) -> ParameterSet {
        let s = r * self.m..(r + 1) * self.m;
        ParameterSet::new(self.amps[s.clone()].to_vec(), self.freqs[s.clone()].to_vec(), self.phases[s].to_vec())
            .expect("rows have equal lengths")
    }
}

/// Frames and targets for one sinusoid count.
#[derive(Debug, Clone)]
pub struct EstimatorSet {
    pub x: Tensor<f32>,
    pub targets: Targets,
}

impl EstimatorSet {
    pub fn from_examples(examples: &[LabeledExample], m: usize) -> Result<Self> {
        if examples.is_empty() {
            return param_err("empty estimator dataset");
        }
        let frames: Vec<&IqFrame> = examples.iter().map(|e| &e.x).collect();
        let labels: Vec<&ParameterSet> = examples.iter().map(|e| &e.label).collect();
        Ok(Self { x: frames_tensor(&frames)?, targets: Targets::from_labels(&labels, m)? })
    }

    pub fn len(&self) -> usize {
        self.x.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, rows: &[usize]) -> Self {
        Self { x: self.x.gather_batch(rows), targets: self.targets.gather(rows) }
    }

    /// Splits off the last `fraction` of the rows as a validation set.
    pub fn split(&self, fraction: f64) -> (Self, Self) {
        let n = self.len();
        let val = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(2));
        let cut = n - val;
        let train: Vec<usize> = (0..cut).collect();
        let valid: Vec<usize> = (cut..n).collect();
        (self.gather(&train), self.gather(&valid))
    }
}

/// Frames and true counts for detection.
#[derive(Debug, Clone)]
pub struct DetectionSet {
    pub x: Tensor<f32>,
    pub counts: Vec<usize>,
}

impl DetectionSet {
    pub fn from_examples(examples: &[LabeledExample]) -> Result<Self> {
        if examples.is_empty() {
            return param_err("empty detection dataset");
        }
        let frames: Vec<&IqFrame> = examples.iter().map(|e| &e.x).collect();
        Ok(Self { x: frames_tensor(&frames)?, counts: examples.iter().map(|e| e.label.m()).collect() })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn gather(&self, rows: &[usize]) -> Self {
        Self { x: self.x.gather_batch(rows), counts: rows.iter().map(|&r| self.counts[r]).collect() }
    }

    pub fn split(&self, fraction: f64) -> (Self, Self) {
        let n = self.len();
        let val = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(2));
        let cut = n - val;
        (self.gather(&(0..cut).collect::<Vec<_>>()), self.gather(&(cut..n).collect::<Vec<_>>()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_stack_in_row_order() {
        let a = IqFrame::from_rows(&[(1.0, 2.0), (3.0, 4.0)]).unwrap();
        let b = IqFrame::from_rows(&[(5.0, 6.0), (7.0, 8.0)]).unwrap();
        let t: Tensor<f64> = frames_tensor(&[&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let c = IqFrame::from_rows(&[(0.0, 0.0)]).unwrap();
        assert!(frames_tensor::<f32>(&[&a, &c]).is_err());
    }

    #[test]
    fn targets_are_frequency_sorted() {
        let p = ParameterSet::new(vec![0.2, 0.9], vec![0.3, 0.1], vec![1.0, 2.0]).unwrap();
        let t = Targets::from_labels(&[&p], 2).unwrap();
        assert_eq!(t.freqs, vec![0.1, 0.3]);
        assert_eq!(t.amps, vec![0.9, 0.2]);
        assert!(Targets::from_labels(&[&p], 3).is_err());
        assert_eq!(t.row(0).freqs(), &[0.1, 0.3]);
    }
}
