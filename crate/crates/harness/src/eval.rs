//! Test-set generation, model loading and per-cell metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use qsine_core::classical::{aic_mdl_detect, classical_estimate, Criterion, PeriodogramOptions, DEFAULT_SUBVECTOR_LEN};
use qsine_core::metrics::{detection_loss, normalized_chamfer, LossVector};
use qsine_core::rng::{derive_seed, tag};
use qsine_core::signal::make_dataset;
use qsine_core::thresholds::{to_db, ThresholdSet};
use qsine_core::{FreqMode, GenConfig, IqFrame, LabeledExample, ParameterSet, QuantizerSpec, Snr};
use qsine_nn::Tensor;
use rayon::prelude::*;
use signalnet::data::frames_tensor;
use signalnet::{BaselineKind, BaselineModel, BundleManifest, DetectionModel, SinusoidEstimator};

use crate::error::{HarnessError, Result};
use crate::records::{CountCell, Metric, MetricRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Algorithm {
    SignalNet,
    Periodogram,
    Aic,
    Mdl,
    AicPeriodogram,
    MdlPeriodogram,
    Mlp,
    Conv,
}

pub const DEFAULT_ALGORITHMS: &[Algorithm] =
    &[Algorithm::SignalNet, Algorithm::Periodogram, Algorithm::Aic, Algorithm::Mdl, Algorithm::AicPeriodogram];

impl Algorithm {
    /// The information criterion behind a classical detector.
    pub fn criterion(self) -> Option<Criterion> {
        match self {
            Algorithm::Aic | Algorithm::AicPeriodogram => Some(Criterion::Aic),
            Algorithm::Mdl | Algorithm::MdlPeriodogram => Some(Criterion::Mdl),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::SignalNet => "signalnet",
            Algorithm::Periodogram => "periodogram",
            Algorithm::Aic => "aic",
            Algorithm::Mdl => "mdl",
            Algorithm::AicPeriodogram => "aic+periodogram",
            Algorithm::MdlPeriodogram => "mdl+periodogram",
            Algorithm::Mlp => "mlp",
            Algorithm::Conv => "conv",
        }
    }

    /// Estimates parameters for a known count.
    pub fn estimates(self) -> bool {
        matches!(self, Algorithm::SignalNet | Algorithm::Periodogram | Algorithm::Mlp | Algorithm::Conv)
    }

    /// Estimates the count.
    pub fn detects(self) -> bool {
        matches!(self, Algorithm::SignalNet | Algorithm::Aic | Algorithm::Mdl)
    }

    /// Estimates count and parameters together.
    pub fn joint(self) -> bool {
        matches!(self, Algorithm::SignalNet | Algorithm::AicPeriodogram | Algorithm::MdlPeriodogram)
    }

    fn baseline_kind(self) -> Option<BaselineKind> {
        match self {
            Algorithm::Mlp => Some(BaselineKind::Mlp),
            Algorithm::Conv => Some(BaselineKind::Conv),
            _ => None,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [
            Algorithm::SignalNet,
            Algorithm::Periodogram,
            Algorithm::Aic,
            Algorithm::Mdl,
            Algorithm::AicPeriodogram,
            Algorithm::MdlPeriodogram,
            Algorithm::Mlp,
            Algorithm::Conv,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| format!("unknown algorithm '{s}'"))
    }
}

pub fn detection_file(bits: u32) -> String {
    format!("detection.b{bits}.sgnt")
}

pub fn estimator_file(bits: u32, m: usize) -> String {
    format!("estimator.b{bits}.m{m}.sgnt")
}

pub fn baseline_file(kind: BaselineKind, bits: u32, m: usize) -> String {
    format!("baseline-{kind}.b{bits}.m{m}.sgnt")
}

pub fn bundle_file(bits: u32) -> String {
    format!("signalnet.b{bits}.txt")
}

/// Trained models for one bit resolution.
#[derive(Debug, Clone, Default)]
pub struct ModelStore {
    pub detection: Option<DetectionModel>,
    pub estimators: BTreeMap<usize, SinusoidEstimator>,
    pub baselines: BTreeMap<(String, usize), BaselineModel>,
}

impl ModelStore {
    /// Loads the signalnet parts listed in the bundle manifest for `bits`
    /// and every baseline file present for `m` in `1..=m_max`.
    pub fn load(dir: &Path, bits: u32, m_max: usize) -> Result<Self> {
        let mut store = ModelStore::default();
        let manifest = dir.join(bundle_file(bits));
        if manifest.exists() {
            let text = std::fs::read_to_string(&manifest).map_err(|e| HarnessError::io(&manifest, e))?;
            let bundle = BundleManifest::parse(&text)?;
            if bundle.bits != bits {
                return Err(HarnessError::Data(format!("{} lists bits {}", manifest.display(), bundle.bits)));
            }
            if let Some(d) = &bundle.detection {
                store.detection = Some(DetectionModel::load(&dir.join(d))?);
            }
            for (m, f) in &bundle.estimators {
                store.estimators.insert(*m, SinusoidEstimator::load(&dir.join(f))?);
            }
        }
        for kind in [BaselineKind::Mlp, BaselineKind::Conv] {
            for m in 1..=m_max {
                let p = dir.join(baseline_file(kind, bits, m));
                if p.exists() {
                    store.baselines.insert((kind.to_string(), m), BaselineModel::load(&p)?);
                }
            }
        }
        Ok(store)
    }

    fn estimator(&self, m: usize) -> Result<&SinusoidEstimator> {
        self.estimators.get(&m).ok_or_else(|| HarnessError::Data(format!("no trained estimator for m = {m}")))
    }

    fn detector(&self) -> Result<&DetectionModel> {
        self.detection.as_ref().ok_or_else(|| HarnessError::Data("no trained detection model".into()))
    }

    fn baseline(&self, kind: BaselineKind, m: usize) -> Result<&BaselineModel> {
        self.baselines
            .get(&(kind.to_string(), m))
            .ok_or_else(|| HarnessError::Data(format!("no trained {kind} baseline for m = {m}")))
    }
}

/// Frame geometry and classical-method settings for one bit resolution.
#[derive(Debug, Clone)]
pub struct Evaluator<'a> {
    pub store: &'a ModelStore,
    pub bits: u32,
    pub n: usize,
    pub m_max: usize,
    pub periodogram: PeriodogramOptions,
    pub subvector_len: usize,
    quantizer: QuantizerSpec,
}

fn tensor(examples: &[LabeledExample]) -> Result<Tensor<f32>> {
    let frames: Vec<&IqFrame> = examples.iter().map(|e| &e.x).collect();
    Ok(frames_tensor(&frames)?)
}

impl<'a> Evaluator<'a> {
    pub fn new(store: &'a ModelStore, bits: u32, n: usize, m_max: usize) -> Result<Self> {
        Ok(Self {
            store,
            bits,
            n,
            m_max,
            periodogram: PeriodogramOptions::default(),
            subvector_len: DEFAULT_SUBVECTOR_LEN.min(n / 2),
            quantizer: QuantizerSpec::new(bits)?,
        })
    }

    fn periodogram(&self, examples: &[LabeledExample], counts: &[usize]) -> Result<Vec<ParameterSet>> {
        examples
            .par_iter()
            .zip(counts)
            .map(|(e, &m)| Ok(classical_estimate(&e.x, m, Some(&self.quantizer), self.periodogram)?))
            .collect()
    }

    /// Parameter estimates for examples that all hold `m` sinusoids.
    pub fn estimate(&self, alg: Algorithm, examples: &[LabeledExample], m: usize) -> Result<Vec<ParameterSet>> {
        match alg {
            Algorithm::SignalNet => Ok(self.store.estimator(m)?.estimate_batch(&tensor(examples)?)?),
            Algorithm::Periodogram => self.periodogram(examples, &vec![m; examples.len()]),
            _ => match alg.baseline_kind() {
                Some(kind) => Ok(self.store.baseline(kind, m)?.estimate_batch(&tensor(examples)?)?),
                None => Err(HarnessError::Data(format!("{alg} does not estimate parameters"))),
            },
        }
    }

    pub fn detect(&self, alg: Algorithm, examples: &[LabeledExample]) -> Result<Vec<usize>> {
        let classical = |c: Criterion| -> Result<Vec<usize>> {
            examples
                .par_iter()
                .map(|e| Ok(aic_mdl_detect(&e.x, c, Some(&self.quantizer), self.subvector_len, self.m_max)?))
                .collect()
        };
        match alg {
            Algorithm::SignalNet => Ok(self.store.detector()?.predict_batch(&tensor(examples)?)?),
            Algorithm::Aic | Algorithm::AicPeriodogram => classical(Criterion::Aic),
            Algorithm::Mdl | Algorithm::MdlPeriodogram => classical(Criterion::Mdl),
            _ => Err(HarnessError::Data(format!("{alg} does not detect counts"))),
        }
    }

    /// Detected count and matching estimates per example.
    pub fn joint(&self, alg: Algorithm, examples: &[LabeledExample]) -> Result<Vec<ParameterSet>> {
        let counts = self.detect(alg, examples)?;
        match alg {
            Algorithm::SignalNet => {
                let mut out: Vec<Option<ParameterSet>> = vec![None; examples.len()];
                let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for (i, &m) in counts.iter().enumerate() {
                    groups.entry(m).or_default().push(i);
                }
                for (m, rows) in groups {
                    let part: Vec<LabeledExample> = rows.iter().map(|&i| examples[i].clone()).collect();
                    for (i, p) in rows.into_iter().zip(self.estimate(Algorithm::SignalNet, &part, m)?) {
                        out[i] = Some(p);
                    }
                }
                Ok(out.into_iter().map(|p| p.expect("every row routed")).collect())
            }
            Algorithm::AicPeriodogram | Algorithm::MdlPeriodogram => self.periodogram(examples, &counts),
            _ => Err(HarnessError::Data(format!("{alg} is not a joint pipeline"))),
        }
    }
}

/// Seed of the test cell `(bits, count, snr index)`, shared by every
/// algorithm evaluated on it.
pub fn cell_seed(seed: u64, bits: u32, m: CountCell, snr_index: usize) -> u64 {
    let code = match m {
        CountCell::Count(m) => m as u64,
        CountCell::Joint => 0,
    };
    derive_seed(derive_seed(seed, tag::SPLIT_TEST, bits as u64), code, snr_index as u64)
}

#[allow(clippy::too_many_arguments)]
pub fn test_examples(
    n: usize,
    m_max: usize,
    bits: u32,
    m: CountCell,
    snr_db: f64,
    seed: u64,
    freq_mode: FreqMode,
    trials: usize,
) -> Result<Vec<LabeledExample>> {
    let cfg = GenConfig {
        n,
        m_max,
        fixed_m: match m {
            CountCell::Count(m) => Some(m),
            CountCell::Joint => None,
        },
        snr: Snr::Fixed(snr_db),
        bits,
        seed,
        freq_mode,
    };
    Ok(make_dataset(&cfg, trials)?)
}

/// Mean squared errors against frequency-sorted labels.
pub fn estimation_errors(examples: &[LabeledExample], est: &[ParameterSet]) -> Result<LossVector> {
    if examples.is_empty() || examples.len() != est.len() {
        return Err(HarnessError::Data("estimates do not match the test set".into()));
    }
    let mut sum = LossVector::ZERO;
    for (e, p) in examples.iter().zip(est) {
        let l = LossVector::between(&e.label.sorted_by_frequency(), p)?;
        sum.amp += l.amp;
        sum.freq += l.freq;
        sum.phase += l.phase;
    }
    let k = examples.len() as f64;
    Ok(LossVector::new(sum.amp / k, sum.freq / k, sum.phase / k))
}

pub fn mean_detection_loss(examples: &[LabeledExample], counts: &[usize]) -> f64 {
    examples.iter().zip(counts).map(|(e, &c)| detection_loss(e.label.m() as f64, c as f64)).sum::<f64>()
        / examples.len() as f64
}

/// Mean threshold-normalized chamfer distance, using the thresholds of the
/// true count.
pub fn mean_chamfer(examples: &[LabeledExample], est: &[ParameterSet], thresholds: &ThresholdSet) -> Result<f64> {
    let mut total = 0.0;
    for (e, p) in examples.iter().zip(est) {
        let label = e.label.sorted_by_frequency();
        total += normalized_chamfer(&label, p, &thresholds.loss_vector(label.m())?)?;
    }
    Ok(total / examples.len() as f64)
}

/// Plan for one evaluation run.
#[derive(Debug, Clone)]
pub struct EvalPlan {
    pub seed: u64,
    pub bits: Vec<u32>,
    pub n: usize,
    pub m_max: usize,
    pub snr_grid: Vec<f64>,
    pub algorithms: Vec<Algorithm>,
    pub counts: Vec<usize>,
    pub joint: bool,
    pub trials: usize,
    pub models: Option<PathBuf>,
    pub periodogram: PeriodogramOptions,
    /// Subvector length for AIC/MDL; `None` uses the default.
    pub subvector_len: Option<usize>,
}

impl EvalPlan {
    fn evaluator<'a>(&self, store: &'a ModelStore, bits: u32) -> Result<Evaluator<'a>> {
        let mut ev = Evaluator::new(store, bits, self.n, self.m_max)?;
        ev.periodogram = self.periodogram;
        if let Some(l) = self.subvector_len {
            ev.subvector_len = l;
        }
        Ok(ev)
    }
}

#[derive(Clone, Copy)]
struct Cell {
    bits: u32,
    m: CountCell,
    snr_index: usize,
}

fn record(alg: &str, cell: &Cell, snr_db: f64, metric: Metric, value: f64, trials: usize, seed: u64) -> MetricRecord {
    MetricRecord {
        algorithm: alg.to_string(),
        bits: cell.bits,
        m: cell.m,
        snr_db,
        metric,
        value,
        n_trials: trials,
        seed,
        freq_mode: None,
    }
}

fn loss_records(alg: &str, cell: &Cell, snr: f64, l: &LossVector, trials: usize, seed: u64) -> Vec<MetricRecord> {
    vec![
        record(alg, cell, snr, Metric::FreqMseDb, to_db(l.freq), trials, seed),
        record(alg, cell, snr, Metric::AmpMseDb, to_db(l.amp), trials, seed),
        record(alg, cell, snr, Metric::PhaseMse, l.phase, trials, seed),
    ]
}

fn load_stores(plan: &EvalPlan) -> Result<BTreeMap<u32, ModelStore>> {
    let needs_models = plan
        .algorithms
        .iter()
        .any(|a| matches!(a, Algorithm::SignalNet | Algorithm::Mlp | Algorithm::Conv));
    let mut stores = BTreeMap::new();
    for &bits in &plan.bits {
        let store = match (&plan.models, needs_models) {
            (Some(dir), _) => ModelStore::load(dir, bits, plan.m_max)?,
            (None, true) => return Err(HarnessError::Usage("the selected algorithms need --models".into())),
            (None, false) => ModelStore::default(),
        };
        stores.insert(bits, store);
    }
    Ok(stores)
}

/// Every metric row plus the threshold rows, sorted. Never trains.
pub fn run_eval(plan: &EvalPlan) -> Result<Vec<MetricRecord>> {
    if plan.snr_grid.is_empty() || plan.trials == 0 || plan.bits.is_empty() {
        return Err(HarnessError::Usage("need a nonempty SNR grid, bits list and trial count".into()));
    }
    let stores = load_stores(plan)?;
    let thresholds = ThresholdSet::compute(plan.m_max, plan.n)?;
    let mut cells = Vec::new();
    for &bits in &plan.bits {
        let mut ms: Vec<CountCell> = Vec::new();
        if plan.algorithms.iter().any(|a| a.estimates()) {
            ms.extend(plan.counts.iter().map(|&m| CountCell::Count(m)));
        }
        if plan.joint && plan.algorithms.iter().any(|a| a.detects() || a.joint()) {
            ms.push(CountCell::Joint);
        }
        for m in ms {
            for snr_index in 0..plan.snr_grid.len() {
                cells.push(Cell { bits, m, snr_index });
            }
        }
    }
    let per_cell: Vec<Vec<MetricRecord>> = cells
        .par_iter()
        .map(|cell| -> Result<Vec<MetricRecord>> {
            let snr = plan.snr_grid[cell.snr_index];
            let seed = cell_seed(plan.seed, cell.bits, cell.m, cell.snr_index);
            let ex = test_examples(plan.n, plan.m_max, cell.bits, cell.m, snr, seed, FreqMode::InDistribution, plan.trials)?;
            let ev = plan.evaluator(&stores[&cell.bits], cell.bits)?;
            let mut rows = Vec::new();
            match cell.m {
                CountCell::Count(m) => {
                    for &alg in plan.algorithms.iter().filter(|a| a.estimates()) {
                        let l = estimation_errors(&ex, &ev.estimate(alg, &ex, m)?)?;
                        rows.extend(loss_records(alg.name(), cell, snr, &l, plan.trials, seed));
                    }
                    let thr = thresholds.loss_vector(m)?;
                    rows.extend(loss_records("threshold", cell, snr, &thr, 1, seed));
                }
                CountCell::Joint => {
                    for &alg in &plan.algorithms {
                        if alg.detects() {
                            let loss = mean_detection_loss(&ex, &ev.detect(alg, &ex)?);
                            rows.push(record(alg.name(), cell, snr, Metric::DetectionLoss, loss, plan.trials, seed));
                        }
                        if alg.joint() {
                            let c = mean_chamfer(&ex, &ev.joint(alg, &ex)?, &thresholds)?;
                            rows.push(record(alg.name(), cell, snr, Metric::ChamferNorm, c, plan.trials, seed));
                        }
                    }
                    let l = thresholds.detection_loss_value;
                    rows.push(record("threshold", cell, snr, Metric::DetectionLoss, l, 1, seed));
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<MetricRecord> = per_cell.into_iter().flatten().collect();
    crate::records::sort_records(&mut rows);
    Ok(rows)
}

/// Paired in-distribution and out-of-distribution rows for the `m`-sinusoid
/// estimator. Both modes of a cell share its seed.
pub fn run_ood(plan: &EvalPlan, m: usize) -> Result<Vec<MetricRecord>> {
    let dir = plan.models.as_ref().ok_or_else(|| HarnessError::Usage("ood needs --models".into()))?;
    let mut stores = BTreeMap::new();
    for &bits in &plan.bits {
        stores.insert(bits, ModelStore::load(dir, bits, plan.m_max)?);
    }
    let mut cells = Vec::new();
    for &bits in &plan.bits {
        for snr_index in 0..plan.snr_grid.len() {
            for mode in [FreqMode::InDistribution, FreqMode::OodUniform] {
                cells.push((Cell { bits, m: CountCell::Count(m), snr_index }, mode));
            }
        }
    }
    let per_cell: Vec<Vec<MetricRecord>> = cells
        .par_iter()
        .map(|(cell, mode)| -> Result<Vec<MetricRecord>> {
            let snr = plan.snr_grid[cell.snr_index];
            let seed = cell_seed(plan.seed, cell.bits, cell.m, cell.snr_index);
            let ex = test_examples(plan.n, plan.m_max, cell.bits, cell.m, snr, seed, *mode, plan.trials)?;
            let ev = plan.evaluator(&stores[&cell.bits], cell.bits)?;
            let l = estimation_errors(&ex, &ev.estimate(Algorithm::SignalNet, &ex, m)?)?;
            let mut rows = loss_records(Algorithm::SignalNet.name(), cell, snr, &l, plan.trials, seed);
            for r in &mut rows {
                r.freq_mode = Some(*mode);
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<MetricRecord> = per_cell.into_iter().flatten().collect();
    crate::records::sort_records(&mut rows);
    Ok(rows)
}
