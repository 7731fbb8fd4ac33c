//! Softmax count detector trained with the expected asymmetric count loss.

use std::path::Path;

use qsine_core::metrics::detection_loss;
use qsine_core::rng::{derive_seed, tag};
use qsine_core::IqFrame;
use qsine_nn::{Mode, Network, Scalar, Tensor};

use crate::arch::detection_network;
use crate::data::frames_tensor;
use crate::error::{param_err, Error, Result};
use crate::model::{split_tagged, tagged_bytes};

/// Rows evaluated per inference call when scoring large sets.
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone)]
pub struct DetectionModel<T = f32> {
    net: Network<T>,
    bits: u32,
    m_max: usize,
    n: usize,
}

/// Mean over rows of `sum_k p_k L(m, k + 1)` and its gradient with respect to
/// the probabilities. `probs` is row-major `[batch, m_max]`.
pub fn expected_detection_loss(probs: &[f64], m_max: usize, counts: &[usize]) -> Result<(f64, Vec<f64>)> {
    if m_max == 0 || probs.len() != counts.len() * m_max || counts.is_empty() {
        return param_err("probabilities and counts disagree");
    }
    let scale = 1.0 / counts.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for (row, &m) in counts.iter().enumerate() {
        for k in 0..m_max {
            let c = detection_loss(m as f64, (k + 1) as f64) * scale;
            loss += probs[row * m_max + k] * c;
            grad[row * m_max + k] = c;
        }
    }
    Ok((loss, grad))
}

/// Class index of the largest entry plus one (first index on ties).
pub fn argmax_count(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best + 1
}

impl<T: Scalar> DetectionModel<T> {
    pub fn new(n: usize, m_max: usize, bits: u32, seed: u64) -> Result<Self> {
        let net = detection_network(n, m_max, derive_seed(seed, tag::INIT, 0), derive_seed(seed, tag::DROPOUT, 0))?;
        Ok(Self { net, bits, m_max, n })
    }

    /// Wraps any network with one `[N, 2]` input and one `[batch, M]`
    /// probability output.
    pub fn from_network(net: Network<T>, bits: u32) -> Result<Self> {
        if net.inputs().len() != 1 || net.outputs().len() != 1 {
            return param_err("a detection network has one input and one output");
        }
        let shape = net.inputs()[0].shape.clone();
        let out = net.value_shape(net.outputs()[0])?.to_vec();
        if shape.len() != 2 || shape[1] != 2 || out.len() != 1 || out[0] == 0 {
            return param_err(format!("unexpected detection shapes: input {shape:?}, output {out:?}"));
        }
        Ok(Self { net, bits, m_max: out[0], n: shape[0] })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn m_max(&self) -> usize {
        self.m_max
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.net.set_mode(mode);
    }

    pub fn cast<U: Scalar>(&self) -> DetectionModel<U> {
        DetectionModel { net: self.net.cast(), bits: self.bits, m_max: self.m_max, n: self.n }
    }

    /// Class probabilities `[batch, M]` in f64, computed in chunks.
    pub fn probabilities(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x.batch() * self.m_max);
        let mut lo = 0;
        while lo < x.batch() {
            let hi = (lo + EVAL_CHUNK).min(x.batch());
            let p = self.net.infer(&[x.slice_batch(lo, hi)])?;
            out.extend(p[0].to_f64_vec());
            lo = hi;
        }
        Ok(out)
    }

    pub fn predict_batch(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(self.probabilities(x)?.chunks(self.m_max).map(argmax_count).collect())
    }

    pub fn predict(&self, x: &IqFrame) -> Result<usize> {
        if x.n() != self.n {
            return param_err(format!("frame has {} samples, detector expects {}", x.n(), self.n));
        }
        Ok(self.predict_batch(&frames_tensor(&[x])?)?[0])
    }

    /// Inference-mode expected loss.
    pub fn loss(&self, x: &Tensor<T>, counts: &[usize]) -> Result<f64> {
        Ok(expected_detection_loss(&self.probabilities(x)?, self.m_max, counts)?.0)
    }

    /// Mean count loss of the argmax decisions.
    pub fn hard_loss(&self, x: &Tensor<T>, counts: &[usize]) -> Result<f64> {
        let pred = self.predict_batch(x)?;
        if pred.len() != counts.len() {
            return param_err("prediction and count lengths differ");
        }
        Ok(pred.iter().zip(counts).map(|(&p, &m)| detection_loss(m as f64, p as f64)).sum::<f64>()
            / counts.len() as f64)
    }

    /// Training-mode forward and backward pass of the expected loss; returns
    /// the loss with gradients stored in the parameters.
    pub fn accumulate_gradients(&mut self, x: &Tensor<T>, counts: &[usize]) -> Result<f64> {
        self.net.zero_grad();
        let p = self.net.forward(std::slice::from_ref(x))?;
        let (loss, grad) = expected_detection_loss(&p[0].to_f64_vec(), self.m_max, counts)?;
        self.net.backward(&[Some(Tensor::from_f64(p[0].shape(), &grad)?)])?;
        Ok(loss)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        tagged_bytes(&format!("detection bits={} m_max={}", self.bits, self.m_max), &self.net)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let (fields, mut net) = split_tagged::<T>(buf, "detection")?;
        let bits: u32 = fields
            .get("bits")
            .and_then(|b| b.parse().ok())
            .ok_or_else(|| Error::Config("detection header lacks bits".into()))?;
        net.set_mode(Mode::Infer);
        Self::from_network(net, bits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use qsine_nn::{finite_diff_check, Activation, LayerSpec, NetworkBuilder};
    use qsine_core::rng::stream;
    use rand::Rng;

    /// Dense layer with zero weights and the given biases, then softmax.
    fn stub_detector(n: usize, logits: &[f64]) -> DetectionModel<f64> {
        let mut b = NetworkBuilder::<f64>::new(0);
        let x = b.input("frame", &[n, 2]).unwrap();
        let y = b
            .chain("d", x, &[LayerSpec::Flatten, LayerSpec::dense(2 * n, logits.len()), LayerSpec::Activation(Activation::Softmax)])
            .unwrap();
        b.output(y).unwrap();
        let mut net = b.build().unwrap();
        let mut p = net.params_mut();
        p[0].value.fill(0.0);
        p[1].value.data_mut().copy_from_slice(logits);
        drop(p);
        net.set_mode(Mode::Infer);
        DetectionModel::from_network(net, 3).unwrap()
    }

    #[test]
    fn expected_loss_of_one_hot_is_the_count_loss() {
        let probs = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let (l, g) = expected_detection_loss(&probs, 5, &[2, 3]).unwrap();
        // row one predicts 3 for m = 2 (0.5), row two predicts 1 for m = 3 (e^2 - 1)
        assert!((l - (0.5 + (2f64.exp() - 1.0)) / 2.0).abs() < 1e-12);
        assert_eq!(g[1], 0.0);
        assert!(expected_detection_loss(&probs, 5, &[2]).is_err());
    }

    #[test]
    fn uniform_prediction_loss_is_the_mean_loss() {
        // uniform probabilities give the average of the loss matrix
        let m = 5;
        let probs = vec![0.2; m * m];
        let counts: Vec<usize> = (1..=m).collect();
        let (l, _) = expected_detection_loss(&probs, m, &counts).unwrap();
        let mut expect = 0.0;
        for a in 1..=m {
            for b in 1..=m {
                expect += detection_loss(a as f64, b as f64);
            }
        }
        assert!((l - expect / 25.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_is_shift_invariant() {
        let logits = [0.3, 1.7, -0.2, 1.69, 0.0];
        let x = IqFrame::from_interleaved(vec![0.5; 16]).unwrap();
        let base = stub_detector(8, &logits).predict(&x).unwrap();
        assert_eq!(base, 2);
        for c in [-40.0, -1.0, 3.5, 25.0] {
            let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
            assert_eq!(stub_detector(8, &shifted).predict(&x).unwrap(), base);
        }
    }

    #[test]
    fn soft_loss_gradient_matches_finite_differences() {
        let net = detection_network::<f64>(16, 5, 3, 4).unwrap();
        let mut r = stream(5);
        let x = Tensor::new(vec![6, 16, 2], (0..6 * 32).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let counts = [1, 2, 3, 4, 5, 2];
        let loss = |out: &[Tensor<f64>]| {
            let (l, g) = expected_detection_loss(out[0].data(), 5, &counts).unwrap();
            (l, vec![Tensor::new(out[0].shape().to_vec(), g).unwrap()])
        };
        let rep = finite_diff_check(&net, &[x], loss, 12, 1e-5, 6).unwrap();
        assert!(rep.max_rel_error <= 1e-5, "{rep:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let d = DetectionModel::<f32>::new(32, 4, 1, 9).unwrap();
        let back = DetectionModel::<f32>::from_bytes(&d.to_bytes()).unwrap();
        assert_eq!((back.bits(), back.m_max(), back.n()), (1, 4, 32));
        let x = Tensor::filled(&[3, 32, 2], 0.25f32);
        assert_eq!(d.probabilities(&x).unwrap(), back.probabilities(&x).unwrap());
    }
}
