//! Chained sinusoid estimator with reconstruction and cancellation.

use std::f64::consts::TAU;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use qsine_core::metrics::LossVector;
use qsine_core::rng::{derive_seed, tag};
use qsine_core::{Complex64, ComplexFrame, IqFrame, ParameterSet};
use qsine_nn::{Mode, Network, Scalar, Tensor};

use crate::arch::block_network;
use crate::data::{frames_tensor, Targets};
use crate::error::{param_err, Error, Result};
use crate::model::{split_tagged, tagged_bytes};

/// `u[n] = a exp(j(2π f n + φ))` for `n = 0..N-1`.
pub fn reconstruct(a: f64, f: f64, phi: f64, n: usize) -> ComplexFrame {
    let samples = (0..n).map(|k| Complex64::from_polar(a, TAU * f * k as f64 + phi)).collect();
    ComplexFrame::new(samples).expect("reconstruction has finite samples for finite inputs")
}

/// How gradients treat the cancellation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualMode {
    /// Residuals are constants; each block learns from its own parameter
    /// errors only.
    #[default]
    StopGradient,
    /// Later blocks' losses also flow back through the reconstruction into
    /// earlier blocks.
    Differentiable,
}

impl fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResidualMode::StopGradient => "stop",
            ResidualMode::Differentiable => "differentiable",
        })
    }
}

impl FromStr for ResidualMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stop" => Ok(ResidualMode::StopGradient),
            "differentiable" => Ok(ResidualMode::Differentiable),
            _ => Err(Error::Config(format!("unknown residual mode '{s}'"))),
        }
    }
}

/// Per-block outputs of one batch, in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutputs {
    pub amp: Vec<f64>,
    pub freq: Vec<f64>,
    pub phase: Vec<f64>,
}

impl BlockOutputs {
    pub(crate) fn from_tensors<T: Scalar>(out: &[Tensor<T>]) -> Result<Self> {
        if out.len() != 3 || out.iter().any(|t| t.shape().len() != 2 || t.shape()[1] != 1) {
            return param_err("a block must produce three [batch, 1] outputs");
        }
        Ok(Self { amp: out[0].to_f64_vec(), freq: out[1].to_f64_vec(), phase: out[2].to_f64_vec() })
    }
}

/// Subtracts each row's reconstructed tone from a `[batch, N, 2]` residual.
pub fn cancel<T: Scalar>(r: &Tensor<T>, est: &BlockOutputs) -> Result<Tensor<T>> {
    let (b, n) = (r.shape()[0], r.shape()[1]);
    if est.amp.len() != b {
        return param_err(format!("{} estimates for a batch of {b}", est.amp.len()));
    }
    let mut out = r.clone();
    for (row, chunk) in out.data_mut().chunks_mut(2 * n).enumerate() {
        let u = reconstruct(est.amp[row], est.freq[row], est.phase[row], n);
        for (z, s) in chunk.chunks_mut(2).zip(u.samples()) {
            z[0] = z[0] - T::of(s.re);
            z[1] = z[1] - T::of(s.im);
        }
    }
    Ok(out)
}

/// `m` estimator blocks applied in sequence to successive residuals.
#[derive(Debug, Clone)]
pub struct SinusoidEstimator<T = f32> {
    bits: u32,
    n: usize,
    blocks: Vec<Network<T>>,
    residual: ResidualMode,
}

impl<T: Scalar> SinusoidEstimator<T> {
    /// Fresh blocks; block `k` is initialized from `derive_seed(seed, INIT, k)`.
    pub fn new(m: usize, bits: u32, n: usize, seed: u64) -> Result<Self> {
        if m < 1 {
            return param_err("an estimator needs at least one block");
        }
        let blocks =
            (0..m).map(|k| block_network(n, derive_seed(seed, tag::INIT, k as u64))).collect::<Result<Vec<_>>>()?;
        Ok(Self { bits, n, blocks, residual: ResidualMode::default() })
    }

    /// Wraps existing blocks. Every block needs one `[N, 2]` input and three
    /// `[batch, 1]` outputs.
    pub fn from_blocks(bits: u32, blocks: Vec<Network<T>>, residual: ResidualMode) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return param_err("an estimator needs at least one block");
        };
        let n = first.inputs().first().map(|i| i.shape[0]).unwrap_or(0);
        for b in &blocks {
            if b.inputs().len() != 1 || b.inputs()[0].shape != [n, 2] || b.outputs().len() != 3 {
                return param_err("every block needs one [N, 2] input and three outputs");
            }
        }
        Ok(Self { bits, n, blocks, residual })
    }

    pub fn m(&self) -> usize {
        self.blocks.len()
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn residual_mode(&self) -> ResidualMode {
        self.residual
    }

    pub fn set_residual_mode(&mut self, mode: ResidualMode) {
        self.residual = mode;
    }

    pub fn blocks(&self) -> &[Network<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Network<T>] {
        &mut self.blocks
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.param_count()).sum()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for b in &mut self.blocks {
            b.set_mode(mode);
        }
    }

    pub fn cast<U: Scalar>(&self) -> SinusoidEstimator<U> {
        SinusoidEstimator {
            bits: self.bits,
            n: self.n,
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
            residual: self.residual,
        }
    }

    /// Inference pass returning every block's outputs and the residuals
    /// `R_1 = x, ..., R_{m+1}`.
    pub fn trace(&self, x: &Tensor<T>) -> Result<(Vec<BlockOutputs>, Vec<Tensor<T>>)> {
        let mut residuals = vec![x.clone()];
        let mut outs = Vec::with_capacity(self.m());
        for block in &self.blocks {
            let r = residuals.last().expect("starts nonempty");
            let o = BlockOutputs::from_tensors(&block.infer(std::slice::from_ref(r))?)?;
            residuals.push(cancel(r, &o)?);
            outs.push(o);
        }
        Ok((outs, residuals))
    }

    /// Estimates for a `[batch, N, 2]` tensor, in block order (not re-sorted).
    pub fn estimate_batch(&self, x: &Tensor<T>) -> Result<Vec<ParameterSet>> {
        let (outs, _) = self.trace(x)?;
        Ok(collect_rows(&outs, x.batch()))
    }

    pub fn estimate(&self, x: &IqFrame) -> Result<ParameterSet> {
        if x.n() != self.n {
            return param_err(format!("frame has {} samples, estimator expects {}", x.n(), self.n));
        }
        let t = frames_tensor::<T>(&[x])?;
        Ok(self.estimate_batch(&t)?.remove(0))
    }

    /// Inference-mode training objective on a batch.
    pub fn loss(&self, x: &Tensor<T>, targets: &Targets, thr: &LossVector) -> Result<f64> {
        let (outs, _) = self.trace(x)?;
        Ok(chain_loss(&outs, targets, thr, &vec![1.0; self.m()])?.0)
    }

    /// Training-mode forward and backward pass. Parameter gradients are
    /// zeroed first and then hold the gradient of the returned loss.
    pub fn accumulate_gradients(&mut self, x: &Tensor<T>, targets: &Targets, thr: &LossVector) -> Result<f64> {
        let weights = vec![1.0; self.m()];
        self.weighted_gradients(x, targets, thr, &weights)
    }

    /// Like [`Self::accumulate_gradients`] with block `k`'s loss terms
    /// scaled by `weights[k]`.
    pub(crate) fn weighted_gradients(
        &mut self,
        x: &Tensor<T>,
        targets: &Targets,
        thr: &LossVector,
        weights: &[f64],
    ) -> Result<f64> {
        if targets.m != self.m() || targets.len() != x.batch() {
            return param_err("targets do not match the batch or the block count");
        }
        for b in &mut self.blocks {
            b.zero_grad();
        }
        let mut residuals = vec![x.clone()];
        let mut outs = Vec::with_capacity(self.m());
        for block in &mut self.blocks {
            let r = residuals.last().expect("starts nonempty");
            let o = BlockOutputs::from_tensors(&block.forward(std::slice::from_ref(r))?)?;
            residuals.push(cancel(r, &o)?);
            outs.push(o);
        }
        let (loss, mut grads) = chain_loss(&outs, targets, thr, weights)?;
        let (batch, n) = (x.batch(), self.n);
        let to_t = |v: &[f64]| Tensor::<T>::from_f64(&[batch, 1], v);
        match self.residual {
            ResidualMode::StopGradient => {
                for (block, g) in self.blocks.iter_mut().zip(&grads) {
                    block.backward(&[Some(to_t(&g.amp)?), Some(to_t(&g.freq)?), Some(to_t(&g.phase)?)])?;
                }
            }
            ResidualMode::Differentiable => {
                // gradient with respect to R_{k+1}; nothing depends on R_{m+1}
                let mut g_next = vec![0.0f64; batch * n * 2];
                for k in (0..self.m()).rev() {
                    let (o, g) = (&outs[k], &mut grads[k]);
                    for row in 0..batch {
                        let gr = &g_next[row * 2 * n..(row + 1) * 2 * n];
                        let (a, f, p) = (o.amp[row], o.freq[row], o.phase[row]);
                        let (mut ga, mut gf, mut gp) = (0.0, 0.0, 0.0);
                        for t in 0..n {
                            let (s, c) = (TAU * f * t as f64 + p).sin_cos();
                            let (g0, g1) = (gr[2 * t], gr[2 * t + 1]);
                            let rot = -g0 * s + g1 * c;
                            // R_{k+1} = R_k - u, hence the minus signs
                            ga -= g0 * c + g1 * s;
                            gf -= a * TAU * t as f64 * rot;
                            gp -= a * rot;
                        }
                        g.amp[row] += ga;
                        g.freq[row] += gf;
                        g.phase[row] += gp;
                    }
                    let gin = self.blocks[k].backward(&[Some(to_t(&g.amp)?), Some(to_t(&g.freq)?), Some(to_t(&g.phase)?)])?;
                    for (acc, v) in g_next.iter_mut().zip(gin[0].data()) {
                        *acc += v.as_f64();
                    }
                }
            }
        }
        Ok(loss)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let union = Network::disjoint_union(&self.blocks, "block")?;
        let header = format!("estimator bits={} m={} residual={}", self.bits, self.m(), self.residual);
        Ok(tagged_bytes(&header, &union))
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let (fields, net) = split_tagged::<T>(buf, "estimator")?;
        let get = |k: &str| fields.get(k).ok_or_else(|| Error::Config(format!("estimator header lacks '{k}'")));
        let bits: u32 = get("bits")?.parse().map_err(|_| Error::Config("bad bits field".into()))?;
        let m: usize = get("m")?.parse().map_err(|_| Error::Config("bad m field".into()))?;
        let residual: ResidualMode = get("residual")?.parse()?;
        let mut blocks = net.split_by_input()?;
        if blocks.len() != m {
            return Err(Error::Config(format!("header says m = {m}, file holds {} blocks", blocks.len())));
        }
        for b in &mut blocks {
            b.set_mode(Mode::Infer);
        }
        Self::from_blocks(bits, blocks, residual)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub(crate) fn collect_rows(outs: &[BlockOutputs], batch: usize) -> Vec<ParameterSet> {
    (0..batch)
        .map(|row| {
            ParameterSet::new(
                outs.iter().map(|o| o.amp[row]).collect(),
                outs.iter().map(|o| o.freq[row]).collect(),
                outs.iter().map(|o| o.phase[row]).collect(),
            )
            .expect("one value per block")
        })
        .collect()
}

/// Threshold-normalized chain loss and its gradient with respect to every
/// block output. Block `k`'s terms are scaled by `weights[k]`.
pub(crate) fn chain_loss(
    outs: &[BlockOutputs],
    targets: &Targets,
    thr: &LossVector,
    weights: &[f64],
) -> Result<(f64, Vec<BlockOutputs>)> {
    let m = targets.m;
    let batch = targets.len();
    if outs.len() != m || weights.len() != m || batch == 0 {
        return param_err("chain loss needs one output set and weight per block");
    }
    if !(thr.amp > 0.0 && thr.freq > 0.0 && thr.phase > 0.0) {
        return param_err("thresholds must be positive");
    }
    // mean over batch and sinusoids, then the 1/m of the normalized sum
    let scale = 1.0 / (batch * m * m) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(m);
    for (k, (o, &w)) in outs.iter().zip(weights).enumerate() {
        let mut g = BlockOutputs { amp: vec![0.0; batch], freq: vec![0.0; batch], phase: vec![0.0; batch] };
        for row in 0..batch {
            let i = row * m + k;
            let da = o.amp[row] - targets.amps[i];
            let df = o.freq[row] - targets.freqs[i];
            let dp = o.phase[row] - targets.phases[i];
            loss += w * scale * (da * da / thr.amp + df * df / thr.freq + dp * dp / thr.phase);
            g.amp[row] = w * scale * 2.0 * da / thr.amp;
            g.freq[row] = w * scale * 2.0 * df / thr.freq;
            g.phase[row] = w * scale * 2.0 * dp / thr.phase;
        }
        grads.push(g);
    }
    Ok((loss, grads))
}
