//! Layer kinds with forward, inference and backward passes.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{param_err, shape_err, NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Selu,
    Softmax,
    Linear,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Selu => "selu",
            Activation::Softmax => "softmax",
            Activation::Linear => "linear",
        })
    }
}

impl FromStr for Activation {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "selu" => Ok(Activation::Selu),
            "softmax" => Ok(Activation::Softmax),
            "linear" => Ok(Activation::Linear),
            other => Err(NnError::Format(format!("unknown activation '{other}'"))),
        }
    }
}

/// Architecture-level description of a layer, enough to rebuild it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    /// Same-padded stride-1 cross-correlation over `[batch, length, in_ch]`.
    Conv1d { in_ch: usize, out_ch: usize, kernel: usize },
    /// Non-overlapping max pooling; a ragged tail is padded with `-inf`.
    MaxPool1d { size: usize },
    /// Per-channel normalization over every axis but the last.
    BatchNorm1d { channels: usize, eps: f64, momentum: f64 },
    Dense { inputs: usize, outputs: usize },
    Activation(Activation),
    /// Inverted dropout; `seed` starts the layer's mask stream.
    Dropout { rate: f64, seed: u64 },
    Flatten,
}

impl LayerSpec {
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        LayerSpec::Conv1d { in_ch, out_ch, kernel }
    }

    pub fn batch_norm(channels: usize) -> Self {
        LayerSpec::BatchNorm1d { channels, eps: BN_EPS, momentum: BN_MOMENTUM }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv1d { in_ch, out_ch, kernel } => {
                if kernel == 0 || in_ch == 0 || out_ch == 0 {
                    return param_err(format!("degenerate conv {self:?}"));
                }
                match input {
                    [l, c] if *c == in_ch && *l > 0 => Ok(vec![*l, out_ch]),
                    _ => shape_err(format!("conv expects [len, {in_ch}], got {input:?}")),
                }
            }
            LayerSpec::MaxPool1d { size } => {
                if size == 0 {
                    return param_err("pool size must be positive");
                }
                match input {
                    [l, c] => Ok(vec![l.div_ceil(size), *c]),
                    _ => shape_err(format!("pool expects [len, ch], got {input:?}")),
                }
            }
            LayerSpec::BatchNorm1d { channels, eps, momentum } => {
                if !(eps > 0.0) || !(0.0..1.0).contains(&momentum) {
                    return param_err(format!("bad batch norm settings {self:?}"));
                }
                if input.last() != Some(&channels) {
                    return shape_err(format!("batch norm over {channels} channels got {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Dense { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return param_err(format!("degenerate dense {self:?}"));
                }
                if input != [inputs] {
                    return shape_err(format!("dense expects [{inputs}], got {input:?}"));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Activation(_) => Ok(input.to_vec()),
            LayerSpec::Dropout { rate, .. } => {
                if !(0.0..1.0).contains(&rate) {
                    return param_err(format!("dropout rate {rate} outside [0, 1)"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv1d { in_ch, out_ch, kernel } => write!(f, "conv1d {in_ch} {out_ch} {kernel}"),
            LayerSpec::MaxPool1d { size } => write!(f, "maxpool1d {size}"),
            LayerSpec::BatchNorm1d { channels, eps, momentum } => {
                write!(f, "batchnorm1d {channels} {eps:e} {momentum}")
            }
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense {inputs} {outputs}"),
            LayerSpec::Activation(a) => write!(f, "activation {a}"),
            LayerSpec::Dropout { rate, seed } => write!(f, "dropout {rate} {seed}"),
            LayerSpec::Flatten => write!(f, "flatten"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        let tok: Vec<&str> = s.split_whitespace().collect();
        let bad = || NnError::Format(format!("cannot parse layer '{s}'"));
        let int = |i: usize| tok.get(i).and_then(|t| t.parse::<usize>().ok()).ok_or_else(bad);
        let real = |i: usize| tok.get(i).and_then(|t| t.parse::<f64>().ok()).ok_or_else(bad);
        let spec = match tok.first().copied() {
            Some("conv1d") if tok.len() == 4 => {
                LayerSpec::Conv1d { in_ch: int(1)?, out_ch: int(2)?, kernel: int(3)? }
            }
            Some("maxpool1d") if tok.len() == 2 => LayerSpec::MaxPool1d { size: int(1)? },
            Some("batchnorm1d") if tok.len() == 4 => {
                LayerSpec::BatchNorm1d { channels: int(1)?, eps: real(2)?, momentum: real(3)? }
            }
            Some("dense") if tok.len() == 3 => LayerSpec::Dense { inputs: int(1)?, outputs: int(2)? },
            Some("activation") if tok.len() == 2 => LayerSpec::Activation(tok[1].parse()?),
            Some("dropout") if tok.len() == 3 => LayerSpec::Dropout {
                rate: real(1)?,
                seed: tok[2].parse().map_err(|_| bad())?,
            },
            Some("flatten") if tok.len() == 1 => LayerSpec::Flatten,
            _ => return Err(bad()),
        };
        Ok(spec)
    }
}

/// Trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    fn cast<U: Scalar>(&self) -> Param<U> {
        Param { value: self.value.cast(), grad: self.grad.cast() }
    }
}

/// Concrete layer with parameters, running state and backward caches.
#[derive(Debug, Clone)]
pub(crate) enum Layer<T> {
    Conv1d(Conv1d<T>),
    MaxPool1d(MaxPool1d),
    BatchNorm1d(BatchNorm1d<T>),
    Dense(Dense<T>),
    Activation(ActivationLayer<T>),
    Dropout(Dropout<T>),
    Flatten(Flatten),
}

fn uniform<T: Scalar>(shape: &[usize], limit: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-limit..limit))).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn check_input<T: Scalar>(x: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if x.shape().len() != rank || x.batch() == 0 {
        return shape_err(format!("{what} expects a nonempty rank-{rank} batch, got {:?}", x.shape()));
    }
    Ok(())
}

impl<T: Scalar> Layer<T> {
    /// Fresh layer with LeCun-uniform weights `U(-sqrt(3/fan_in), sqrt(3/fan_in))`
    /// and zero biases.
    pub(crate) fn init(spec: LayerSpec, rng: &mut ChaCha8Rng) -> Self {
        match spec {
            LayerSpec::Conv1d { in_ch, out_ch, kernel } => {
                let fan_in = kernel * in_ch;
                Layer::Conv1d(Conv1d {
                    in_ch,
                    out_ch,
                    kernel,
                    weight: Param::new(uniform(&[fan_in, out_ch], (3.0 / fan_in as f64).sqrt(), rng)),
                    bias: Param::new(Tensor::zeros(&[out_ch])),
                    cache: None,
                })
            }
            LayerSpec::MaxPool1d { size } => Layer::MaxPool1d(MaxPool1d { size, cache: None }),
            LayerSpec::BatchNorm1d { channels, eps, momentum } => Layer::BatchNorm1d(BatchNorm1d {
                channels,
                eps,
                momentum,
                gamma: Param::new(Tensor::filled(&[channels], T::one())),
                beta: Param::new(Tensor::zeros(&[channels])),
                running_mean: Tensor::zeros(&[channels]),
                running_var: Tensor::filled(&[channels], T::one()),
                cache: None,
            }),
            LayerSpec::Dense { inputs, outputs } => Layer::Dense(Dense {
                inputs,
                outputs,
                weight: Param::new(uniform(&[inputs, outputs], (3.0 / inputs as f64).sqrt(), rng)),
                bias: Param::new(Tensor::zeros(&[outputs])),
                cache: None,
            }),
            LayerSpec::Activation(kind) => Layer::Activation(ActivationLayer { kind, cache: None }),
            LayerSpec::Dropout { rate, seed } => Layer::Dropout(Dropout {
                rate,
                seed,
                rng: ChaCha8Rng::seed_from_u64(seed),
                mask: None,
            }),
            LayerSpec::Flatten => Layer::Flatten(Flatten { input_shape: None }),
        }
    }

    pub(crate) fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv1d(l) => LayerSpec::Conv1d { in_ch: l.in_ch, out_ch: l.out_ch, kernel: l.kernel },
            Layer::MaxPool1d(l) => LayerSpec::MaxPool1d { size: l.size },
            Layer::BatchNorm1d(l) => {
                LayerSpec::BatchNorm1d { channels: l.channels, eps: l.eps, momentum: l.momentum }
            }
            Layer::Dense(l) => LayerSpec::Dense { inputs: l.inputs, outputs: l.outputs },
            Layer::Activation(l) => LayerSpec::Activation(l.kind),
            Layer::Dropout(l) => LayerSpec::Dropout { rate: l.rate, seed: l.seed },
            Layer::Flatten(_) => LayerSpec::Flatten,
        }
    }

    /// Forward pass that caches what backward needs. `train` selects batch
    /// statistics and dropout masks.
    pub(crate) fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        match self {
            Layer::Conv1d(l) => l.forward(x),
            Layer::MaxPool1d(l) => l.forward(x),
            Layer::BatchNorm1d(l) => l.forward(x, train),
            Layer::Dense(l) => l.forward(x),
            Layer::Activation(l) => l.forward(x),
            Layer::Dropout(l) => l.forward(x, train),
            Layer::Flatten(l) => l.forward(x),
        }
    }

    /// Inference-mode forward pass without side effects.
    pub(crate) fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv1d(l) => l.apply(x).map(|(y, _)| y),
            Layer::MaxPool1d(l) => l.apply(x).map(|(y, _)| y),
            Layer::BatchNorm1d(l) => l.apply_running(x).map(|(y, _)| y),
            Layer::Dense(l) => l.apply(x),
            Layer::Activation(l) => Ok(activate(l.kind, x)),
            Layer::Dropout(_) => Ok(x.clone()),
            Layer::Flatten(_) => flatten(x),
        }
    }

    pub(crate) fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv1d(l) => l.backward(dy),
            Layer::MaxPool1d(l) => l.backward(dy),
            Layer::BatchNorm1d(l) => l.backward(dy),
            Layer::Dense(l) => l.backward(dy),
            Layer::Activation(l) => l.backward(dy),
            Layer::Dropout(l) => l.backward(dy),
            Layer::Flatten(l) => l.backward(dy),
        }
    }

    pub(crate) fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv1d(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm1d(l) => vec![&l.gamma, &l.beta],
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv1d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm1d(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    /// Non-trainable persistent tensors (batch-norm running statistics).
    pub(crate) fn state(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::BatchNorm1d(l) => vec![&l.running_mean, &l.running_var],
            _ => Vec::new(),
        }
    }

    /// Parameter values followed by running state, in checkpoint order.
    pub(crate) fn persistent_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv1d(l) => vec![&mut l.weight.value, &mut l.bias.value],
            Layer::BatchNorm1d(l) => {
                vec![&mut l.gamma.value, &mut l.beta.value, &mut l.running_mean, &mut l.running_var]
            }
            Layer::Dense(l) => vec![&mut l.weight.value, &mut l.bias.value],
            _ => Vec::new(),
        }
    }

    pub(crate) fn clear_cache(&mut self) {
        match self {
            Layer::Conv1d(l) => l.cache = None,
            Layer::MaxPool1d(l) => l.cache = None,
            Layer::BatchNorm1d(l) => l.cache = None,
            Layer::Dense(l) => l.cache = None,
            Layer::Activation(l) => l.cache = None,
            Layer::Dropout(l) => l.mask = None,
            Layer::Flatten(l) => l.input_shape = None,
        }
    }

    /// Same layer in another precision; caches are dropped.
    pub(crate) fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::Conv1d(l) => Layer::Conv1d(Conv1d {
                in_ch: l.in_ch,
                out_ch: l.out_ch,
                kernel: l.kernel,
                weight: l.weight.cast(),
                bias: l.bias.cast(),
                cache: None,
            }),
            Layer::MaxPool1d(l) => Layer::MaxPool1d(MaxPool1d { size: l.size, cache: None }),
            Layer::BatchNorm1d(l) => Layer::BatchNorm1d(BatchNorm1d {
                channels: l.channels,
                eps: l.eps,
                momentum: l.momentum,
                gamma: l.gamma.cast(),
                beta: l.beta.cast(),
                running_mean: l.running_mean.cast(),
                running_var: l.running_var.cast(),
                cache: None,
            }),
            Layer::Dense(l) => Layer::Dense(Dense {
                inputs: l.inputs,
                outputs: l.outputs,
                weight: l.weight.cast(),
                bias: l.bias.cast(),
                cache: None,
            }),
            Layer::Activation(l) => Layer::Activation(ActivationLayer { kind: l.kind, cache: None }),
            Layer::Dropout(l) => Layer::Dropout(Dropout {
                rate: l.rate,
                seed: l.seed,
                rng: l.rng.clone(),
                mask: None,
            }),
            Layer::Flatten(_) => Layer::Flatten(Flatten { input_shape: None }),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv1d<T> {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    /// `[kernel * in_ch, out_ch]`, row index `tap * in_ch + channel`.
    weight: Param<T>,
    bias: Param<T>,
    cache: Option<ConvCache<T>>,
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    cols: Vec<T>,
    batch: usize,
    len: usize,
}

impl<T: Scalar> Conv1d<T> {
    fn pad_left(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// `[batch * len, kernel * in_ch]` patch matrix with zero padding.
    fn im2col(&self, x: &[T], batch: usize, len: usize) -> Vec<T> {
        let (k, c, pl) = (self.kernel, self.in_ch, self.pad_left());
        let mut cols = vec![T::zero(); batch * len * k * c];
        for b in 0..batch {
            for l in 0..len {
                let row = (b * len + l) * k * c;
                for j in 0..k {
                    let Some(src) = (l + j).checked_sub(pl).filter(|&s| s < len) else {
                        continue;
                    };
                    let from = (b * len + src) * c;
                    cols[row + j * c..row + (j + 1) * c].copy_from_slice(&x[from..from + c]);
                }
            }
        }
        cols
    }

    fn apply(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        check_input(x, 3, "conv1d")?;
        let (batch, len, ch) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if ch != self.in_ch {
            return shape_err(format!("conv1d expects {} channels, got {ch}", self.in_ch));
        }
        let cols = self.im2col(x.data(), batch, len);
        let rows = batch * len;
        let mut y = Vec::with_capacity(rows * self.out_ch);
        for _ in 0..rows {
            y.extend_from_slice(self.bias.value.data());
        }
        T::gemm(
            rows,
            self.kernel * self.in_ch,
            self.out_ch,
            &cols,
            false,
            self.weight.value.data(),
            false,
            T::one(),
            &mut y,
        );
        Ok((Tensor::from_parts(vec![batch, len, self.out_ch], y), ConvCache { cols, batch, len }))
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, cache) = self.apply(x)?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let ConvCache { cols, batch, len } =
            self.cache.as_ref().ok_or_else(|| NnError::Parameter("conv backward before forward".into()))?;
        let (batch, len) = (*batch, *len);
        if dy.shape() != [batch, len, self.out_ch] {
            return shape_err(format!("conv gradient shape {:?}", dy.shape()));
        }
        let (rows, kc, co) = (batch * len, self.kernel * self.in_ch, self.out_ch);
        T::gemm(kc, rows, co, cols, true, dy.data(), false, T::one(), self.weight.grad.data_mut());
        let db = self.bias.grad.data_mut();
        for r in dy.data().chunks_exact(co) {
            db.iter_mut().zip(r).for_each(|(g, &v)| *g = *g + v);
        }
        let mut dcols = vec![T::zero(); rows * kc];
        T::gemm(rows, co, kc, dy.data(), false, self.weight.value.data(), true, T::zero(), &mut dcols);
        // scatter patches back onto the input positions they were read from
        let (k, c, pl) = (self.kernel, self.in_ch, self.pad_left());
        let mut dx = vec![T::zero(); batch * len * c];
        for b in 0..batch {
            for l in 0..len {
                let row = (b * len + l) * kc;
                for j in 0..k {
                    let Some(src) = (l + j).checked_sub(pl).filter(|&s| s < len) else {
                        continue;
                    };
                    let to = (b * len + src) * c;
                    for ci in 0..c {
                        dx[to + ci] = dx[to + ci] + dcols[row + j * c + ci];
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![batch, len, c], dx))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct MaxPool1d {
    size: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool1d {
    fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        check_input(x, 3, "maxpool1d")?;
        let (batch, len, ch) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let out_len = len.div_ceil(self.size);
        let d = x.data();
        let mut y = Vec::with_capacity(batch * out_len * ch);
        let mut arg = Vec::with_capacity(batch * out_len * ch);
        for b in 0..batch {
            for o in 0..out_len {
                let lo = o * self.size;
                let hi = (lo + self.size).min(len);
                for c in 0..ch {
                    let mut best = (b * len + lo) * ch + c;
                    for i in lo + 1..hi {
                        let idx = (b * len + i) * ch + c;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    y.push(d[best]);
                    arg.push(best);
                }
            }
        }
        Ok((Tensor::from_parts(vec![batch, out_len, ch], y), arg))
    }

    fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, arg) = self.apply(x)?;
        self.cache = Some((arg, x.shape().to_vec()));
        Ok(y)
    }

    fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (arg, shape) =
            self.cache.as_ref().ok_or_else(|| NnError::Parameter("pool backward before forward".into()))?;
        if dy.len() != arg.len() {
            return shape_err(format!("pool gradient shape {:?}", dy.shape()));
        }
        let mut dx = Tensor::zeros(shape);
        let dxd = dx.data_mut();
        for (&i, &g) in arg.iter().zip(dy.data()) {
            dxd[i] = dxd[i] + g;
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BatchNorm1d<T> {
    channels: usize,
    eps: f64,
    momentum: f64,
    gamma: Param<T>,
    beta: Param<T>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
    /// Batch statistics were used (their dependence on x enters backward).
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm1d<T> {
    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() < 2 || x.batch() == 0 || x.shape().last() != Some(&self.channels) {
            return shape_err(format!("batch norm over {} channels got {:?}", self.channels, x.shape()));
        }
        Ok(())
    }

    fn normalize(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> (Tensor<T>, Vec<T>) {
        let c = self.channels;
        let mut xhat = Vec::with_capacity(x.len());
        let mut y = Vec::with_capacity(x.len());
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for row in x.data().chunks_exact(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                y.push(g[j] * h + b[j]);
            }
        }
        (Tensor::from_parts(x.shape().to_vec(), y), xhat)
    }

    fn apply_running(&self, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        self.check(x)?;
        let eps = T::of(self.eps);
        let inv_std: Vec<T> =
            self.running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = self.normalize(x, self.running_mean.data(), &inv_std);
        Ok((y, BnCache { xhat, inv_std, shape: x.shape().to_vec(), batch_stats: false }))
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        if !train {
            let (y, cache) = self.apply_running(x)?;
            self.cache = Some(cache);
            return Ok(y);
        }
        self.check(x)?;
        if x.batch() < 2 {
            return param_err("batch norm needs a batch of at least 2 in training mode");
        }
        let c = self.channels;
        let rows = x.len() / c;
        // statistics accumulated in f64 for stability in f32 mode
        let mut mean = vec![0.0f64; c];
        for row in x.data().chunks_exact(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v.as_f64());
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0f64; c];
        for row in x.data().chunks_exact(c) {
            for j in 0..c {
                let d = row[j].as_f64() - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
        let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + self.eps).sqrt())).collect();
        let (y, xhat) = self.normalize(x, &mean_t, &inv_std);
        let mo = self.momentum;
        for j in 0..c {
            let rm = &mut self.running_mean.data_mut()[j];
            *rm = T::of(mo * rm.as_f64() + (1.0 - mo) * mean[j]);
            let rv = &mut self.running_var.data_mut()[j];
            *rv = T::of(mo * rv.as_f64() + (1.0 - mo) * var[j]);
        }
        self.cache = Some(BnCache { xhat, inv_std, shape: x.shape().to_vec(), batch_stats: true });
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache =
            self.cache.as_ref().ok_or_else(|| NnError::Parameter("batch norm backward before forward".into()))?;
        if dy.shape() != cache.shape.as_slice() {
            return shape_err(format!("batch norm gradient shape {:?}", dy.shape()));
        }
        let c = self.channels;
        let rows = dy.len() / c;
        let g = self.gamma.value.data().to_vec();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for (drow, hrow) in dy.data().chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for j in 0..c {
                sum_dy[j] = sum_dy[j] + drow[j];
                sum_dy_xhat[j] = sum_dy_xhat[j] + drow[j] * hrow[j];
            }
        }
        for j in 0..c {
            self.gamma.grad.data_mut()[j] = self.gamma.grad.data()[j] + sum_dy_xhat[j];
            self.beta.grad.data_mut()[j] = self.beta.grad.data()[j] + sum_dy[j];
        }
        let mut dx = Vec::with_capacity(dy.len());
        if cache.batch_stats {
            let n = T::of(rows as f64);
            for (drow, hrow) in dy.data().chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
                for j in 0..c {
                    // dxhat = dy * gamma; dx = inv_std / n * (n dxhat - sum dxhat - xhat sum(dxhat xhat))
                    let v = n * drow[j] - sum_dy[j] - hrow[j] * sum_dy_xhat[j];
                    dx.push(g[j] * cache.inv_std[j] * v / n);
                }
            }
        } else {
            for drow in dy.data().chunks_exact(c) {
                for j in 0..c {
                    dx.push(drow[j] * g[j] * cache.inv_std[j]);
                }
            }
        }
        Ok(Tensor::from_parts(cache.shape.clone(), dx))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Dense<T> {
    inputs: usize,
    outputs: usize,
    /// `[inputs, outputs]`.
    weight: Param<T>,
    bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_input(x, 2, "dense")?;
        if x.shape()[1] != self.inputs {
            return shape_err(format!("dense expects {} inputs, got {:?}", self.inputs, x.shape()));
        }
        let batch = x.batch();
        let mut y = Vec::with_capacity(batch * self.outputs);
        for _ in 0..batch {
            y.extend_from_slice(self.bias.value.data());
        }
        T::gemm(batch, self.inputs, self.outputs, x.data(), false, self.weight.value.data(), false, T::one(), &mut y);
        Ok(Tensor::from_parts(vec![batch, self.outputs], y))
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.apply(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.as_ref().ok_or_else(|| NnError::Parameter("dense backward before forward".into()))?;
        let batch = x.batch();
        if dy.shape() != [batch, self.outputs] {
            return shape_err(format!("dense gradient shape {:?}", dy.shape()));
        }
        let (i, o) = (self.inputs, self.outputs);
        T::gemm(i, batch, o, x.data(), true, dy.data(), false, T::one(), self.weight.grad.data_mut());
        let db = self.bias.grad.data_mut();
        for r in dy.data().chunks_exact(o) {
            db.iter_mut().zip(r).for_each(|(g, &v)| *g = *g + v);
        }
        let mut dx = vec![T::zero(); batch * i];
        T::gemm(batch, o, i, dy.data(), false, self.weight.value.data(), true, T::zero(), &mut dx);
        Ok(Tensor::from_parts(vec![batch, i], dx))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ActivationLayer<T> {
    kind: Activation,
    /// (input, output)
    cache: Option<(Tensor<T>, Tensor<T>)>,
}

/// Applies an activation elementwise; softmax runs over the last axis with
/// max subtraction.
pub fn activate<T: Scalar>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    let lambda = T::of(SELU_LAMBDA);
    let la = T::of(SELU_LAMBDA * SELU_ALPHA);
    let data: Vec<T> = match kind {
        Activation::Linear => x.data().to_vec(),
        Activation::Relu => x.data().iter().map(|&v| v.max(T::zero())).collect(),
        Activation::Selu => x
            .data()
            .iter()
            .map(|&v| if v > T::zero() { lambda * v } else { la * (v.exp() - T::one()) })
            .collect(),
        Activation::Softmax => {
            let width = x.shape().last().copied().unwrap_or(1).max(1);
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks_exact(width) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
                let s: T = e.iter().copied().sum();
                out.extend(e.into_iter().map(|v| v / s));
            }
            out
        }
    };
    Tensor::from_parts(x.shape().to_vec(), data)
}

impl<T: Scalar> ActivationLayer<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = activate(self.kind, x);
        self.cache = Some((x.clone(), y.clone()));
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (x, y) =
            self.cache.as_ref().ok_or_else(|| NnError::Parameter("activation backward before forward".into()))?;
        if dy.shape() != x.shape() {
            return shape_err(format!("activation gradient shape {:?}", dy.shape()));
        }
        let lambda = T::of(SELU_LAMBDA);
        let la = T::of(SELU_LAMBDA * SELU_ALPHA);
        let g = dy.data();
        let dx: Vec<T> = match self.kind {
            Activation::Linear => g.to_vec(),
            Activation::Relu => {
                x.data().iter().zip(g).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect()
            }
            Activation::Selu => x
                .data()
                .iter()
                .zip(g)
                .map(|(&v, &d)| if v > T::zero() { lambda * d } else { la * v.exp() * d })
                .collect(),
            Activation::Softmax => {
                let width = x.shape().last().copied().unwrap_or(1).max(1);
                let mut out = Vec::with_capacity(g.len());
                for (yr, gr) in y.data().chunks_exact(width).zip(g.chunks_exact(width)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    out.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                out
            }
        };
        Ok(Tensor::from_parts(x.shape().to_vec(), dx))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Dropout<T> {
    rate: f64,
    seed: u64,
    rng: ChaCha8Rng,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> Dropout<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        if !train || self.rate == 0.0 {
            self.mask = None;
            return Ok(x.clone());
        }
        let keep = T::of(1.0 / (1.0 - self.rate));
        let mask: Vec<T> = (0..x.len())
            .map(|_| if self.rng.random::<f64>() < self.rate { T::zero() } else { keep })
            .collect();
        let y = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.mask = Some(mask);
        Ok(Tensor::from_parts(x.shape().to_vec(), y))
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.mask {
            None => Ok(dy.clone()),
            Some(mask) => {
                if mask.len() != dy.len() {
                    return shape_err(format!("dropout gradient shape {:?}", dy.shape()));
                }
                let d = dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                Ok(Tensor::from_parts(dy.shape().to_vec(), d))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Flatten {
    input_shape: Option<Vec<usize>>,
}

fn flatten<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().is_empty() || x.batch() == 0 {
        return shape_err(format!("flatten needs a nonempty batch, got {:?}", x.shape()));
    }
    let b = x.batch();
    x.clone().reshape(&[b, x.len() / b])
}

impl Flatten {
    fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = flatten(x)?;
        self.input_shape = Some(x.shape().to_vec());
        Ok(y)
    }

    fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self
            .input_shape
            .as_ref()
            .ok_or_else(|| NnError::Parameter("flatten backward before forward".into()))?;
        dy.clone().reshape(shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(spec: LayerSpec) -> Layer<f64> {
        Layer::init(spec, &mut ChaCha8Rng::seed_from_u64(0))
    }

    fn set_conv(l: &mut Layer<f64>, w: &[f64], b: &[f64]) {
        let Layer::Conv1d(c) = l else { panic!() };
        c.weight.value.data_mut().copy_from_slice(w);
        c.bias.value.data_mut().copy_from_slice(b);
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn spec_text_round_trip() {
        let specs = [
            LayerSpec::conv(2, 8, 3),
            LayerSpec::MaxPool1d { size: 4 },
            LayerSpec::batch_norm(16),
            LayerSpec::dense(256, 16),
            LayerSpec::Activation(Activation::Selu),
            LayerSpec::Dropout { rate: 0.7, seed: 42 },
            LayerSpec::Flatten,
        ];
        for s in specs {
            assert_eq!(s.to_string().parse::<LayerSpec>().unwrap(), s);
        }
        assert!("conv1d 1 2".parse::<LayerSpec>().is_err());
    }

    #[test]
    fn shape_inference() {
        assert_eq!(LayerSpec::conv(2, 32, 3).output_shape(&[64, 2]).unwrap(), vec![64, 32]);
        assert!(LayerSpec::conv(2, 32, 3).output_shape(&[64, 3]).is_err());
        assert_eq!(LayerSpec::MaxPool1d { size: 4 }.output_shape(&[16, 128]).unwrap(), vec![4, 128]);
        assert_eq!(LayerSpec::MaxPool1d { size: 2 }.output_shape(&[5, 1]).unwrap(), vec![3, 1]);
        assert_eq!(LayerSpec::Flatten.output_shape(&[4, 128]).unwrap(), vec![512]);
        assert!(LayerSpec::dense(3, 2).output_shape(&[4]).is_err());
        assert!(LayerSpec::Dropout { rate: 1.0, seed: 0 }.output_shape(&[3]).is_err());
    }

    #[test]
    fn conv_identity_kernel() {
        let mut l = layer(LayerSpec::conv(1, 1, 1));
        set_conv(&mut l, &[1.0], &[0.0]);
        let x = t(&[1, 3, 1], &[1.0, 2.0, 4.0]);
        assert_eq!(l.forward(&x, true).unwrap(), x);
    }

    #[test]
    fn conv_difference_kernel_is_cross_correlation() {
        // taps [1, -1] at offsets 0, +1: y[l] = x[l] - x[l + 1]
        let mut l = layer(LayerSpec::conv(1, 1, 2));
        set_conv(&mut l, &[1.0, -1.0], &[0.0]);
        let y = l.forward(&t(&[1, 3, 1], &[1.0, 2.0, 4.0]), true).unwrap();
        assert_eq!(&y.data()[..2], &[-1.0, -2.0]);
        // zero padding on the right edge
        assert_eq!(y.data()[2], 4.0);
    }

    #[test]
    fn conv_same_padding_centred_kernel() {
        let mut l = layer(LayerSpec::conv(1, 1, 3));
        set_conv(&mut l, &[1.0, 1.0, 1.0], &[0.0]);
        let y = l.forward(&t(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]), true).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn conv_zero_weights_give_bias() {
        let mut l = layer(LayerSpec::conv(2, 3, 3));
        set_conv(&mut l, &[0.0; 18], &[0.5, -1.0, 2.0]);
        let y = l.infer(&t(&[2, 4, 2], &[1.0; 16])).unwrap();
        for row in y.data().chunks_exact(3) {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn maxpool_examples() {
        let mut l = layer(LayerSpec::MaxPool1d { size: 2 });
        let y = l.forward(&t(&[1, 4, 1], &[1.0, 3.0, 2.0, 5.0]), true).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);
        let y = l.infer(&t(&[1, 4, 1], &[2.0; 4])).unwrap();
        assert_eq!(y.data(), &[2.0, 2.0]);
        let mut id = layer(LayerSpec::MaxPool1d { size: 1 });
        let x = t(&[1, 3, 1], &[1.0, -3.0, 2.0]);
        assert_eq!(id.forward(&x, true).unwrap(), x);
        // ragged tail behaves as padded with -inf
        let y = l.infer(&t(&[1, 3, 1], &[-5.0, -7.0, -9.0])).unwrap();
        assert_eq!(y.data(), &[-5.0, -9.0]);
    }

    #[test]
    fn maxpool_routes_gradient_to_first_argmax() {
        let mut l = layer(LayerSpec::MaxPool1d { size: 2 });
        l.forward(&t(&[1, 4, 1], &[2.0, 2.0, 1.0, 5.0]), true).unwrap();
        let dx = l.backward(&t(&[1, 2, 1], &[10.0, 20.0])).unwrap();
        assert_eq!(dx.data(), &[10.0, 0.0, 0.0, 20.0]);
    }

    #[test]
    fn batch_norm_constant_batch_is_zero() {
        let mut l = layer(LayerSpec::batch_norm(2));
        let y = l.forward(&t(&[3, 2], &[4.0, -1.0, 4.0, -1.0, 4.0, -1.0]), true).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn batch_norm_train_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..32 * 10 * 3).map(|i| rng.random_range(-2.0..5.0) * (1 + i % 3) as f64).collect();
        let mut l = layer(LayerSpec::batch_norm(3));
        let y = l.forward(&t(&[32, 10, 3], &data), true).unwrap();
        let rows = y.len() / 3;
        for c in 0..3 {
            let vals: Vec<f64> = y.data().iter().skip(c).step_by(3).copied().collect();
            let mean = vals.iter().sum::<f64>() / rows as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
            assert!(mean.abs() < 1e-6, "{mean}");
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
    }

    #[test]
    fn batch_norm_infer_defaults_to_affine_identity() {
        let mut l = layer(LayerSpec::batch_norm(2));
        if let Layer::BatchNorm1d(bn) = &mut l {
            bn.gamma.value.data_mut().copy_from_slice(&[2.0, 1.0]);
            bn.beta.value.data_mut().copy_from_slice(&[0.0, 3.0]);
        }
        let y = l.infer(&t(&[1, 2], &[1.5, -1.0])).unwrap();
        let s = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((y.data()[0] - 3.0 * s).abs() < 1e-12);
        assert!((y.data()[1] - (3.0 - s)).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_rejects_single_sample_training() {
        let mut l = layer(LayerSpec::batch_norm(2));
        assert!(matches!(l.forward(&t(&[1, 4, 2], &[1.0; 8]), true), Err(NnError::Parameter(_))));
        assert!(l.forward(&t(&[1, 4, 2], &[1.0; 8]), false).is_ok());
    }

    #[test]
    fn batch_norm_running_stats_update() {
        let mut l = layer(LayerSpec::batch_norm(1));
        l.forward(&t(&[2, 1], &[1.0, 3.0]), true).unwrap();
        let st = l.state();
        assert!((st[0].data()[0] - 0.02).abs() < 1e-12);
        assert!((st[1].data()[0] - (0.99 + 0.01)).abs() < 1e-12);
    }

    #[test]
    fn dense_examples() {
        let mut l = layer(LayerSpec::dense(1, 1));
        if let Layer::Dense(d) = &mut l {
            d.weight.value.data_mut()[0] = 2.0;
            d.bias.value.data_mut()[0] = 1.0;
        }
        assert_eq!(l.forward(&t(&[1, 1], &[3.0]), true).unwrap().data(), &[7.0]);

        let mut id = layer(LayerSpec::dense(2, 2));
        if let Layer::Dense(d) = &mut id {
            d.weight.value.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(id.infer(&x).unwrap(), x);

        let mut z = layer(LayerSpec::dense(3, 2));
        if let Layer::Dense(d) = &mut z {
            d.weight.value.fill(0.0);
            d.bias.value.data_mut().copy_from_slice(&[1.0, -2.0]);
        }
        assert_eq!(z.infer(&t(&[2, 3], &[5.0; 6])).unwrap().data(), &[1.0, -2.0, 1.0, -2.0]);
        assert!(z.infer(&t(&[1, 2], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn activation_examples() {
        let x = t(&[1, 3], &[0.0, -1.0, 1.0]);
        let s = activate(Activation::Selu, &x);
        assert_eq!(s.data()[0], 0.0);
        assert!((s.data()[2] - 1.050_70).abs() < 1e-5);
        assert_eq!(activate(Activation::Relu, &x).data(), &[0.0, 0.0, 1.0]);
        let sm = activate(Activation::Softmax, &t(&[1, 2], &[0.0, 3f64.ln()]));
        assert!((sm.data()[0] - 0.25).abs() < 1e-15 && (sm.data()[1] - 0.75).abs() < 1e-15);
        let big = activate(Activation::Softmax, &t(&[1, 3], &[1000.0, 1000.0, -1000.0]));
        assert!(big.data().iter().all(|v| v.is_finite()));
        assert!((big.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_identity_cases() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut zero = layer(LayerSpec::Dropout { rate: 0.0, seed: 1 });
        assert_eq!(zero.forward(&x, true).unwrap(), x);
        let mut heavy = layer(LayerSpec::Dropout { rate: 0.7, seed: 1 });
        assert_eq!(heavy.forward(&x, false).unwrap(), x);
        assert_eq!(heavy.infer(&x).unwrap(), x);
    }

    #[test]
    fn dropout_survivor_fraction_and_mean() {
        let n = 1_000_000;
        let x = Tensor::<f64>::filled(&[1, n], 1.0);
        let mut l = layer(LayerSpec::Dropout { rate: 0.7, seed: 9 });
        let y = l.forward(&x, true).unwrap();
        let alive = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((alive - 0.3).abs() / 0.3 < 0.005, "{alive}");
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn flatten_round_trip() {
        let mut l = layer(LayerSpec::Flatten);
        let x = t(&[2, 2, 3], &[0.0; 12]);
        let y = l.forward(&x, true).unwrap();
        assert_eq!(y.shape(), &[2, 6]);
        assert_eq!(l.backward(&y).unwrap().shape(), &[2, 2, 3]);
    }
}
