//! Size-matched MLP and convolutional baselines that estimate all `m`
//! sinusoids in one pass.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use qsine_core::metrics::LossVector;
use qsine_core::rng::{derive_seed, tag};
use qsine_core::ParameterSet;
use qsine_nn::{Activation, LayerSpec, Mode, Network, NetworkBuilder, Scalar, Tensor};

use crate::arch::{block_network, KERNEL};
use crate::data::Targets;
use crate::detection::EVAL_CHUNK;
use crate::error::{param_err, Error, Result};
use crate::estimator::{chain_loss, collect_rows, BlockOutputs};
use crate::model::{split_tagged, tagged_bytes};

/// Allowed relative deviation from the matched estimator's parameter count.
pub const SIZE_TOLERANCE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// Two dense hidden layers with ReLU.
    Mlp,
    /// Two conv/ReLU/pool hidden layers.
    Conv,
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::Mlp => "mlp",
            BaselineKind::Conv => "conv",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(BaselineKind::Mlp),
            "conv" => Ok(BaselineKind::Conv),
            _ => Err(Error::Config(format!("unknown baseline '{s}'"))),
        }
    }
}

/// Parameter count of `m` chained estimator blocks.
pub fn chain_param_count(m: usize, n: usize) -> Result<usize> {
    Ok(m * block_network::<f32>(n, 0)?.param_count())
}

fn baseline_params(kind: BaselineKind, width: usize, m: usize, n: usize) -> usize {
    let (w, out) = (width, 3 * m);
    match kind {
        BaselineKind::Mlp => 2 * n * w + w + w * w + w + w * out + out,
        BaselineKind::Conv => (KERNEL * 2 * w + w) + (KERNEL * w * w + w) + n / 4 * w * out + out,
    }
}

/// Hidden width (units or channels) whose parameter count is closest to the
/// estimator chain's.
pub fn matched_width(kind: BaselineKind, m: usize, n: usize) -> Result<usize> {
    let target = chain_param_count(m, n)?;
    let mut w = 1;
    while baseline_params(kind, w + 1, m, n) <= target {
        w += 1;
    }
    let below = target - baseline_params(kind, w, m, n).min(target);
    let above = baseline_params(kind, w + 1, m, n) - target;
    Ok(if above < below { w + 1 } else { w })
}

fn build<T: Scalar>(kind: BaselineKind, m: usize, n: usize, width: usize, seed: u64) -> Result<Network<T>> {
    let relu = || LayerSpec::Activation(Activation::Relu);
    let pool = || LayerSpec::MaxPool1d { size: 2 };
    let specs = match kind {
        BaselineKind::Mlp => vec![
            LayerSpec::Flatten,
            LayerSpec::dense(2 * n, width),
            relu(),
            LayerSpec::dense(width, width),
            relu(),
            LayerSpec::dense(width, 3 * m),
        ],
        BaselineKind::Conv => vec![
            LayerSpec::conv(2, width, KERNEL),
            relu(),
            pool(),
            LayerSpec::conv(width, width, KERNEL),
            relu(),
            pool(),
            LayerSpec::Flatten,
            LayerSpec::dense(n / 4 * width, 3 * m),
        ],
    };
    let mut b = NetworkBuilder::<T>::new(seed);
    let x = b.input("frame", &[n, 2])?;
    let y = b.chain("h", x, &specs)?;
    b.output(y)?;
    Ok(b.build()?)
}

/// A baseline with `3m` linear outputs stacked as `[a_1..a_m, f_1..f_m,
/// φ_1..φ_m]`.
#[derive(Debug, Clone)]
pub struct BaselineModel<T = f32> {
    kind: BaselineKind,
    m: usize,
    bits: u32,
    net: Network<T>,
}

impl<T: Scalar> BaselineModel<T> {
    pub fn new(kind: BaselineKind, m: usize, bits: u32, n: usize, seed: u64) -> Result<Self> {
        if m < 1 || n % 4 != 0 || n == 0 {
            return param_err(format!("baseline needs m >= 1 and N divisible by 4 (m = {m}, N = {n})"));
        }
        let width = matched_width(kind, m, n)?;
        let net = build(kind, m, n, width, derive_seed(seed, tag::INIT, 0))?;
        Ok(Self { kind, m, bits, net })
    }

    pub fn kind(&self) -> BaselineKind {
        self.kind
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn bits(&self) -> u32 {
        self.bits
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

    fn split(&self, out: &[f64], batch: usize) -> Vec<BlockOutputs> {
        let m = self.m;
        (0..m)
            .map(|k| BlockOutputs {
                amp: (0..batch).map(|r| out[r * 3 * m + k]).collect(),
                freq: (0..batch).map(|r| out[r * 3 * m + m + k]).collect(),
                phase: (0..batch).map(|r| out[r * 3 * m + 2 * m + k]).collect(),
            })
            .collect()
    }

    fn outputs(&self, x: &Tensor<T>) -> Result<Vec<BlockOutputs>> {
        let mut flat = Vec::with_capacity(x.batch() * 3 * self.m);
        let mut lo = 0;
        while lo < x.batch() {
            let hi = (lo + EVAL_CHUNK).min(x.batch());
            flat.extend(self.net.infer(&[x.slice_batch(lo, hi)])?[0].to_f64_vec());
            lo = hi;
        }
        Ok(self.split(&flat, x.batch()))
    }

    pub fn estimate_batch(&self, x: &Tensor<T>) -> Result<Vec<ParameterSet>> {
        Ok(collect_rows(&self.outputs(x)?, x.batch()))
    }

    pub fn loss(&self, x: &Tensor<T>, targets: &Targets, thr: &LossVector) -> Result<f64> {
        Ok(chain_loss(&self.outputs(x)?, targets, thr, &vec![1.0; self.m])?.0)
    }

    pub fn accumulate_gradients(&mut self, x: &Tensor<T>, targets: &Targets, thr: &LossVector) -> Result<f64> {
        if targets.m != self.m || targets.len() != x.batch() {
            return param_err("targets do not match the batch or the count");
        }
        self.net.zero_grad();
        let batch = x.batch();
        let out = self.net.forward(std::slice::from_ref(x))?;
        let (loss, grads) = chain_loss(&self.split(&out[0].to_f64_vec(), batch), targets, thr, &vec![1.0; self.m])?;
        let m = self.m;
        let mut g = vec![0.0; batch * 3 * m];
        for (k, gk) in grads.iter().enumerate() {
            for r in 0..batch {
                g[r * 3 * m + k] = gk.amp[r];
                g[r * 3 * m + m + k] = gk.freq[r];
                g[r * 3 * m + 2 * m + k] = gk.phase[r];
            }
        }
        self.net.backward(&[Some(Tensor::from_f64(&[batch, 3 * m], &g)?)])?;
        Ok(loss)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        tagged_bytes(&format!("baseline kind={} m={} bits={}", self.kind, self.m, self.bits), &self.net)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let (fields, mut net) = split_tagged::<T>(buf, "baseline")?;
        let get = |k: &str| fields.get(k).ok_or_else(|| Error::Config(format!("baseline header lacks '{k}'")));
        let kind: BaselineKind = get("kind")?.parse()?;
        let m: usize = get("m")?.parse().map_err(|_| Error::Config("bad m field".into()))?;
        let bits: u32 = get("bits")?.parse().map_err(|_| Error::Config("bad bits field".into()))?;
        net.set_mode(Mode::Infer);
        Ok(Self { kind, m, bits, net })
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
    use crate::arch::BLOCK_PARAMS_N64;

    #[test]
    fn sizes_match_the_estimator_chain() {
        for kind in [BaselineKind::Mlp, BaselineKind::Conv] {
            for m in 1..=5 {
                let b = BaselineModel::<f32>::new(kind, m, 3, 64, 0).unwrap();
                let target = (m * BLOCK_PARAMS_N64) as f64;
                let got = b.network().param_count() as f64;
                assert!((got - target).abs() <= SIZE_TOLERANCE * target, "{kind} m={m}: {got} vs {target}");
                assert_eq!(got as usize, baseline_params(kind, matched_width(kind, m, 64).unwrap(), m, 64));
            }
        }
    }

    #[test]
    fn output_has_three_m_values() {
        let b = BaselineModel::<f32>::new(BaselineKind::Conv, 3, 3, 64, 1).unwrap();
        let y = b.network().infer(&[Tensor::filled(&[2, 64, 2], 0.1)]).unwrap();
        assert_eq!(y[0].shape(), &[2, 9]);
        let est = b.estimate_batch(&Tensor::filled(&[2, 64, 2], 0.1)).unwrap();
        assert!(est.iter().all(|p| p.m() == 3));
    }

    #[test]
    fn stacked_outputs_map_to_sinusoids() {
        let b = BaselineModel::<f64>::new(BaselineKind::Mlp, 2, 3, 8, 2).unwrap();
        let out = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let s = b.split(&out, 1);
        assert_eq!((s[0].amp[0], s[0].freq[0], s[0].phase[0]), (1.0, 3.0, 5.0));
        assert_eq!((s[1].amp[0], s[1].freq[0], s[1].phase[0]), (2.0, 4.0, 6.0));
    }

    #[test]
    fn kind_parses() {
        assert_eq!("conv".parse::<BaselineKind>().unwrap(), BaselineKind::Conv);
        assert!("rnn".parse::<BaselineKind>().is_err());
    }
}
