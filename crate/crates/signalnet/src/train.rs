//! Mini-batch Adam training with best-validation selection, learning-rate
//! reduction on plateau and early stopping.

use std::fmt::Write as _;

use qsine_core::metrics::LossVector;
use qsine_core::rng::{substream, tag};
use qsine_core::thresholds::{amplitude_threshold, frequency_threshold, phase_threshold};
use qsine_core::LabeledExample;
use qsine_nn::{Adam, Mode, Param, Scalar};
use rand::seq::SliceRandom;

use crate::baseline::{BaselineKind, BaselineModel};
use crate::data::{DetectionSet, EstimatorSet};
use crate::detection::{DetectionModel, EVAL_CHUNK};
use crate::error::{param_err, Error, Result};
use crate::estimator::SinusoidEstimator;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Trailing share of the data held out for validation.
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub lr_factor: f64,
    /// Epochs without improvement before the learning rate is scaled.
    pub lr_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch: 32, epochs: 20, val_fraction: 0.1, patience: 5, lr_factor: 0.5, lr_patience: 2, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch < 2 || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "need lr > 0, batch >= 2 and a validation fraction in [0, 1): {self:?}"
            )));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) || self.patience == 0 || self.lr_patience == 0 {
            return Err(Error::Config(format!("need lr factor in (0, 1] and positive patience values: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,lr";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            writeln!(s, "{},{:.9e},{:.9e},{:.6e}", r.epoch, r.train_loss, r.val_loss, r.lr).ok();
        }
        s
    }
}

/// A model that can be fitted on a dataset type `D`.
pub trait Trainable<D>: Clone {
    fn set_mode(&mut self, mode: Mode);
    fn params_mut(&mut self) -> Vec<&mut Param<f32>>;
    /// Loss on the selected rows with gradients left in the parameters.
    fn gradient_step(&mut self, data: &D, rows: &[usize]) -> Result<f64>;
    /// Inference-mode loss over the whole set.
    fn evaluate(&self, data: &D) -> Result<f64>;
}

pub trait Rows {
    fn rows(&self) -> usize;
}

impl Rows for EstimatorSet {
    fn rows(&self) -> usize {
        self.len()
    }
}

impl Rows for DetectionSet {
    fn rows(&self) -> usize {
        self.len()
    }
}

/// Per-parameter thresholds used to normalize the estimator loss.
pub fn estimator_thresholds(m: usize, n: usize) -> Result<LossVector> {
    Ok(LossVector::new(amplitude_threshold().1, frequency_threshold(m, n)?, phase_threshold().1))
}

/// Batch-size weighted mean of `f` over chunks of `len` rows.
fn chunked_mean(len: usize, mut f: impl FnMut(&[usize]) -> Result<f64>) -> Result<f64> {
    let mut total = 0.0;
    let mut lo = 0;
    while lo < len {
        let hi = (lo + EVAL_CHUNK).min(len);
        let rows: Vec<usize> = (lo..hi).collect();
        total += f(&rows)? * rows.len() as f64;
        lo = hi;
    }
    Ok(total / len as f64)
}

#[derive(Debug, Clone)]
pub struct EstimatorTask {
    pub model: SinusoidEstimator<f32>,
    pub thresholds: LossVector,
}

impl Trainable<EstimatorSet> for EstimatorTask {
    fn set_mode(&mut self, mode: Mode) {
        self.model.set_mode(mode);
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        self.model.blocks_mut().iter_mut().flat_map(|b| b.params_mut()).collect()
    }

    fn gradient_step(&mut self, data: &EstimatorSet, rows: &[usize]) -> Result<f64> {
        let part = data.gather(rows);
        self.model.accumulate_gradients(&part.x, &part.targets, &self.thresholds)
    }

    fn evaluate(&self, data: &EstimatorSet) -> Result<f64> {
        chunked_mean(data.len(), |rows| {
            let part = data.gather(rows);
            self.model.loss(&part.x, &part.targets, &self.thresholds)
        })
    }
}

#[derive(Debug, Clone)]
pub struct BaselineTask {
    pub model: BaselineModel<f32>,
    pub thresholds: LossVector,
}

impl Trainable<EstimatorSet> for BaselineTask {
    fn set_mode(&mut self, mode: Mode) {
        self.model.set_mode(mode);
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        self.model.network_mut().params_mut()
    }

    fn gradient_step(&mut self, data: &EstimatorSet, rows: &[usize]) -> Result<f64> {
        let part = data.gather(rows);
        self.model.accumulate_gradients(&part.x, &part.targets, &self.thresholds)
    }

    fn evaluate(&self, data: &EstimatorSet) -> Result<f64> {
        self.model.loss(&data.x, &data.targets, &self.thresholds)
    }
}

impl Trainable<DetectionSet> for DetectionModel<f32> {
    fn set_mode(&mut self, mode: Mode) {
        DetectionModel::set_mode(self, mode);
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        self.network_mut().params_mut()
    }

    fn gradient_step(&mut self, data: &DetectionSet, rows: &[usize]) -> Result<f64> {
        let part = data.gather(rows);
        self.accumulate_gradients(&part.x, &part.counts)
    }

    fn evaluate(&self, data: &DetectionSet) -> Result<f64> {
        self.loss(&data.x, &data.counts)
    }
}

/// Trains `model` in place and leaves it holding the best-validation
/// weights (the final weights when there is no validation data). With zero
/// epochs the model is untouched.
pub fn fit<D: Rows, M: Trainable<D>>(model: &mut M, train: &D, val: Option<&D>, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if train.rows() < 2 {
        return param_err("training needs at least two rows");
    }
    let mut log = TrainLog::default();
    let mut adam = Adam::new(cfg.lr);
    let mut best: Option<(f64, M)> = None;
    let (mut since_best, mut since_lr) = (0, 0);
    let mut order: Vec<usize> = (0..train.rows()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut substream(cfg.seed, tag::SHUFFLE, epoch as u64));
        model.set_mode(Mode::Train);
        let (mut sum, mut count) = (0.0, 0usize);
        for rows in order.chunks(cfg.batch) {
            // batch normalization needs two rows
            if rows.len() < 2 {
                continue;
            }
            let loss = model.gradient_step(train, rows)?;
            adam.step(&mut model.params_mut())?;
            sum += loss * rows.len() as f64;
            count += rows.len();
        }
        model.set_mode(Mode::Infer);
        let train_loss = sum / count as f64;
        let val_loss = match val {
            Some(v) if v.rows() > 0 => model.evaluate(v)?,
            _ => train_loss,
        };
        if !val_loss.is_finite() {
            return Err(Error::Parameter(format!("validation loss diverged at epoch {epoch}")));
        }
        log.records.push(EpochRecord { epoch, train_loss, val_loss, lr: adam.lr });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.clone()));
            log.best_epoch = Some(epoch);
            since_best = 0;
            since_lr = 0;
        } else {
            since_best += 1;
            since_lr += 1;
            if since_lr >= cfg.lr_patience {
                adam.scale_lr(cfg.lr_factor);
                since_lr = 0;
            }
            if since_best >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    model.set_mode(Mode::Infer);
    Ok(log)
}

fn check_counts(examples: &[LabeledExample], m: usize) -> Result<()> {
    if examples.is_empty() {
        return param_err("empty training set");
    }
    if let Some(e) = examples.iter().find(|e| e.label.m() != m) {
        return param_err(format!("mixed counts: expected {m}, found {}", e.label.m()));
    }
    Ok(())
}

/// Trains an `m`-block estimator at resolution `bits` on examples that all
/// hold `m` sinusoids.
pub fn train_estimator(
    examples: &[LabeledExample],
    m: usize,
    bits: u32,
    cfg: &TrainConfig,
) -> Result<(SinusoidEstimator<f32>, TrainLog)> {
    check_counts(examples, m)?;
    let n = examples[0].x.n();
    let model = SinusoidEstimator::new(m, bits, n, cfg.seed)?;
    fit_estimator(model, examples, cfg)
}

/// Like [`train_estimator`] starting from a given model (for example one
/// with the differentiable residual mode).
pub fn fit_estimator(
    model: SinusoidEstimator<f32>,
    examples: &[LabeledExample],
    cfg: &TrainConfig,
) -> Result<(SinusoidEstimator<f32>, TrainLog)> {
    check_counts(examples, model.m())?;
    let set = EstimatorSet::from_examples(examples, model.m())?;
    let (train, val) = set.split(cfg.val_fraction);
    let thresholds = estimator_thresholds(model.m(), model.n())?;
    let mut task = EstimatorTask { model, thresholds };
    let log = fit(&mut task, &train, Some(&val), cfg)?;
    Ok((task.model, log))
}

pub fn train_baseline(
    kind: BaselineKind,
    examples: &[LabeledExample],
    m: usize,
    bits: u32,
    cfg: &TrainConfig,
) -> Result<(BaselineModel<f32>, TrainLog)> {
    check_counts(examples, m)?;
    let n = examples[0].x.n();
    let set = EstimatorSet::from_examples(examples, m)?;
    let (train, val) = set.split(cfg.val_fraction);
    let mut task = BaselineTask { model: BaselineModel::new(kind, m, bits, n, cfg.seed)?, thresholds: estimator_thresholds(m, n)? };
    let log = fit(&mut task, &train, Some(&val), cfg)?;
    Ok((task.model, log))
}

/// Trains the count detector on examples with counts in `1..=m_max`.
pub fn train_detection(
    examples: &[LabeledExample],
    m_max: usize,
    bits: u32,
    cfg: &TrainConfig,
) -> Result<(DetectionModel<f32>, TrainLog)> {
    if examples.is_empty() {
        return param_err("empty training set");
    }
    if let Some(e) = examples.iter().find(|e| e.label.m() < 1 || e.label.m() > m_max) {
        return param_err(format!("count {} outside 1..={m_max}", e.label.m()));
    }
    let n = examples[0].x.n();
    let set = DetectionSet::from_examples(examples)?;
    let (train, val) = set.split(cfg.val_fraction);
    let mut model = DetectionModel::new(n, m_max, bits, cfg.seed)?;
    let log = fit(&mut model, &train, Some(&val), cfg)?;
    Ok((model, log))
}

/// Copies every parameter as f64, for comparisons in tests.
pub fn flatten_params<T: Scalar>(params: &[&Param<T>]) -> Vec<f64> {
    params.iter().flat_map(|p| p.value.data().iter().map(|v| v.as_f64())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use qsine_core::{FreqMode, GenConfig, IqFrame, ParameterSet, Snr};
    use qsine_nn::Tensor;

    fn gen(m: usize, count: usize, seed: u64) -> Vec<LabeledExample> {
        let cfg = GenConfig {
            n: 64,
            m_max: 5,
            fixed_m: Some(m),
            snr: Snr::Fixed(10.0),
            bits: 3,
            seed,
            freq_mode: FreqMode::InDistribution,
        };
        qsine_core::signal::make_dataset(&cfg, count).unwrap()
    }

    fn est_params(e: &SinusoidEstimator<f32>) -> Vec<f64> {
        flatten_params(&e.blocks().iter().flat_map(|b| b.params()).collect::<Vec<_>>())
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let data = gen(1, 40, 1);
        let cfg = TrainConfig { epochs: 0, seed: 7, ..TrainConfig::default() };
        let (trained, log) = train_estimator(&data, 1, 3, &cfg).unwrap();
        let init = SinusoidEstimator::<f32>::new(1, 3, 64, 7).unwrap();
        assert_eq!(est_params(&trained), est_params(&init));
        assert!(log.records.is_empty());
    }

    #[test]
    fn rejects_empty_and_mixed_sets() {
        let cfg = TrainConfig::default();
        assert!(matches!(train_estimator(&[], 1, 3, &cfg), Err(Error::Parameter(_))));
        let mut data = gen(1, 4, 2);
        data.extend(gen(2, 4, 3));
        assert!(matches!(train_estimator(&data, 1, 3, &cfg), Err(Error::Parameter(_))));
        assert!(train_detection(&data, 1, 3, &cfg).is_err());
    }

    #[test]
    fn overfits_one_batch() {
        let one = gen(1, 1, 4).remove(0);
        let set = EstimatorSet::from_examples(&vec![one; 32], 1).unwrap();
        let mut task = EstimatorTask {
            model: SinusoidEstimator::new(1, 3, 64, 5).unwrap(),
            thresholds: estimator_thresholds(1, 64).unwrap(),
        };
        let rows: Vec<usize> = (0..32).collect();
        let mut adam = Adam::new(1e-3);
        task.set_mode(Mode::Train);
        let first = task.gradient_step(&set, &rows).unwrap();
        let mut last = first;
        for _ in 0..200 {
            adam.step(&mut task.params_mut()).unwrap();
            last = task.gradient_step(&set, &rows).unwrap();
        }
        assert!(last <= 0.2 * first, "loss {first} -> {last}");
    }

    #[test]
    fn memorized_tone_leaves_small_residual() {
        // noiseless, unquantized unit-power tone
        let label = ParameterSet::new(vec![1.0], vec![0.137], vec![1.1]).unwrap();
        let u = crate::estimator::reconstruct(1.0, 0.137, 1.1, 64);
        let x = qsine_core::signal::to_iq(&u);
        let ex = LabeledExample { x: x.clone(), label, snr_db: f64::INFINITY };
        let set = EstimatorSet::from_examples(&vec![ex; 32], 1).unwrap();
        let mut task = EstimatorTask {
            model: SinusoidEstimator::new(1, 3, 64, 6).unwrap(),
            thresholds: estimator_thresholds(1, 64).unwrap(),
        };
        let rows: Vec<usize> = (0..32).collect();
        let mut adam = Adam::new(1e-3);
        task.set_mode(Mode::Train);
        for _ in 0..600 {
            task.gradient_step(&set, &rows).unwrap();
            adam.step(&mut task.params_mut()).unwrap();
        }
        task.set_mode(Mode::Infer);
        // batch statistics of identical rows match the inference statistics
        // only approximately, so score in training mode
        let t = task.model.clone();
        let batch: Tensor<f32> = set.x.clone();
        let mut blk = t.blocks()[0].clone();
        blk.set_mode(Mode::Train);
        let out = blk.forward(std::slice::from_ref(&batch)).unwrap();
        let o = crate::estimator::BlockOutputs::from_tensors(&out).unwrap();
        let r = crate::estimator::cancel(&batch.slice_batch(0, 1), &crate::estimator::BlockOutputs {
            amp: vec![o.amp[0]],
            freq: vec![o.freq[0]],
            phase: vec![o.phase[0]],
        })
        .unwrap();
        let energy = |d: &[f32]| d.iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
        let ratio = energy(r.data()) / energy(IqFrame::data(&x).iter().map(|v| *v as f32).collect::<Vec<_>>().as_slice());
        assert!(ratio < 0.01, "residual energy ratio {ratio}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = gen(2, 96, 8);
        let cfg = TrainConfig { epochs: 2, seed: 3, ..TrainConfig::default() };
        let (a, la) = train_estimator(&data, 2, 3, &cfg).unwrap();
        let (b, lb) = train_estimator(&data, 2, 3, &cfg).unwrap();
        assert_eq!(est_params(&a), est_params(&b));
        assert_eq!(la, lb);
    }

    #[test]
    fn keeps_best_validation_epoch() {
        let data = gen(1, 128, 9);
        let cfg = TrainConfig { epochs: 6, seed: 4, lr: 3e-3, ..TrainConfig::default() };
        let (model, log) = train_estimator(&data, 1, 3, &cfg).unwrap();
        let best = log.best_epoch.unwrap();
        let best_val = log.records[best].val_loss;
        assert!(log.records.iter().all(|r| r.val_loss >= best_val));
        // the returned weights reproduce the selected validation loss
        let set = EstimatorSet::from_examples(&data, 1).unwrap();
        let (_, val) = set.split(cfg.val_fraction);
        let again = model.loss(&val.x, &val.targets, &estimator_thresholds(1, 64).unwrap()).unwrap();
        assert!((again - best_val).abs() <= 1e-9 * best_val.max(1.0));
    }

    /// Model whose validation loss follows a script, to check the schedule.
    #[derive(Clone)]
    struct Scripted {
        losses: Vec<f64>,
        epoch: usize,
        p: Param<f32>,
    }

    impl Rows for Vec<u8> {
        fn rows(&self) -> usize {
            self.len()
        }
    }

    impl Trainable<Vec<u8>> for Scripted {
        fn set_mode(&mut self, mode: Mode) {
            if mode == Mode::Infer {
                self.epoch += 1;
            }
        }
        fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
            vec![&mut self.p]
        }
        fn gradient_step(&mut self, _: &Vec<u8>, _: &[usize]) -> Result<f64> {
            Ok(1.0)
        }
        fn evaluate(&self, _: &Vec<u8>) -> Result<f64> {
            Ok(self.losses[self.epoch - 1])
        }
    }

    #[test]
    fn early_stop_and_lr_schedule() {
        let p = Param { value: Tensor::zeros(&[1]), grad: Tensor::zeros(&[1]) };
        let mut m = Scripted { losses: vec![5.0, 4.0, 4.5, 4.2, 4.1, 4.0, 3.0], epoch: 0, p };
        let cfg = TrainConfig { epochs: 7, patience: 3, lr_patience: 2, batch: 4, ..TrainConfig::default() };
        let data = vec![0u8; 8];
        let log = fit(&mut m, &data, Some(&data), &cfg).unwrap();
        // epochs 2, 3, 4 fail to beat 4.0, so training stops after epoch 4
        assert_eq!(log.records.len(), 5);
        assert!(log.stopped_early);
        assert_eq!(log.best_epoch, Some(1));
        assert_eq!(log.records[4].lr, 5e-4);
        assert_eq!(log.records[3].lr, 1e-3);
        assert!(log.to_csv().starts_with("epoch,train_loss,val_loss,lr\n0,"));
    }

    #[test]
    fn separable_detection_toy() {
        // each class is a distinct constant frame
        let mut ex = Vec::new();
        for i in 0..160 {
            let m = i % 4 + 1;
            let v = -0.75 + 0.5 * (m - 1) as f64;
            let label = ParameterSet::new(vec![0.5; m], (0..m).map(|k| 0.05 + 0.1 * k as f64).collect(), vec![0.0; m]).unwrap();
            ex.push(LabeledExample { x: IqFrame::from_interleaved(vec![v; 32]).unwrap(), label, snr_db: 0.0 });
        }
        let set = DetectionSet::from_examples(&ex).unwrap();
        let mut model = DetectionModel::<f32>::new(16, 4, 3, 1).unwrap();
        let cfg = TrainConfig { epochs: 30, val_fraction: 0.0, patience: 30, lr_patience: 30, ..TrainConfig::default() };
        let log = fit(&mut model, &set, None, &cfg).unwrap();
        let last = log.records.last().unwrap().train_loss;
        assert!(last < 0.05, "final training loss {last}");
        assert_eq!(model.predict_batch(&set.x).unwrap(), set.counts);
    }
}
