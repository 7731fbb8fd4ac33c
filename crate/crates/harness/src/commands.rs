//! Subcommand bodies. Each returns the text to print on success.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use qsine_core::dataset::{dataset_paths, load_dataset, save_dataset, DatasetHeader};
use qsine_core::rng::{derive_seed, tag};
use qsine_core::signal::make_dataset;
use qsine_core::thresholds::{to_db, ThresholdSet};
use qsine_core::{FreqMode, GenConfig, LabeledExample, Snr};
use signalnet::train::{fit_estimator, train_baseline, train_detection};
use signalnet::{BaselineKind, BundleManifest, ResidualMode, SinusoidEstimator, TrainConfig, TrainLog};

use crate::config::Shared;
use crate::error::{usage, HarnessError, Result};
use crate::eval::{baseline_file, bundle_file, detection_file, estimator_file, run_eval, run_ood, EvalPlan};
use crate::records::to_csv;

/// Which disjoint substream a generated dataset comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> u64 {
        match self {
            Split::Train => tag::SPLIT_TRAIN,
            Split::Val => tag::SPLIT_VAL,
            Split::Test => tag::SPLIT_TEST,
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split '{s}'")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerateArgs {
    pub shared: Shared,
    pub count: usize,
    pub m: Option<usize>,
    /// Fixed SNR; otherwise uniform over the shared SNR range.
    pub snr: Option<f64>,
    pub freq_mode: FreqMode,
    pub split: Split,
    /// Stem; one dataset `<stem>.b<bits>` is written per resolution.
    pub out: PathBuf,
}

pub fn dataset_stem(out: &Path, bits: u32) -> PathBuf {
    PathBuf::from(format!("{}.b{bits}", out.display()))
}

pub fn generate(args: &GenerateArgs) -> Result<String> {
    let s = &args.shared;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let mut summary = String::new();
    for &bits in &s.bits {
        let cfg = GenConfig {
            n: s.n,
            m_max: s.m_max,
            fixed_m: args.m,
            snr: match args.snr {
                Some(db) => Snr::Fixed(db),
                None => Snr::Uniform { min: s.snr_min, max: s.snr_max },
            },
            bits,
            seed: derive_seed(s.seed, args.split.tag(), bits as u64),
            freq_mode: args.freq_mode,
        };
        let examples = make_dataset(&cfg, args.count)?;
        let stem = dataset_stem(&args.out, bits);
        save_dataset(&stem, &DatasetHeader { n: s.n, m_max: s.m_max, bits }, &examples)?;
        summary.push_str(&dataset_summary(&stem, bits, &examples));
    }
    Ok(summary)
}

/// Counts per `m` and the mean drawn and measured SNR.
fn dataset_summary(stem: &Path, bits: u32, examples: &[LabeledExample]) -> String {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for e in examples {
        *counts.entry(e.label.m()).or_default() += 1;
    }
    let mean_snr = examples.iter().map(|e| e.snr_db).sum::<f64>() / examples.len() as f64;
    let mut s = format!("{} (bits = {bits}): {} examples, mean SNR {mean_snr:.3} dB\n", stem.display(), examples.len());
    for (m, c) in counts {
        writeln!(s, "  m = {m}: {c}").ok();
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Detection,
    Estimator,
    Baseline,
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "detection" => Ok(Task::Detection),
            "estimator" => Ok(Task::Estimator),
            "baseline" => Ok(Task::Baseline),
            _ => Err(format!("unknown task '{s}'")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    /// Dataset stem (without `.labels.csv`).
    pub data: PathBuf,
    pub task: Task,
    /// Counts to train; all counts present in the data when empty.
    pub counts: Vec<usize>,
    pub kind: BaselineKind,
    pub residual: ResidualMode,
    pub cfg: TrainConfig,
    pub out: PathBuf,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn write_log(out: &Path, model_file: &str, log: &TrainLog) -> Result<String> {
    let name = format!("{model_file}.log.csv");
    write_file(&out.join(&name), &log.to_csv())?;
    Ok(name)
}

/// Rewrites the bundle manifest from the detection and estimator files
/// present in `dir`.
pub fn refresh_manifest(dir: &Path, bits: u32, n: usize, m_max: usize) -> Result<()> {
    let det = detection_file(bits);
    let bundle = BundleManifest {
        bits,
        n,
        m_max,
        detection: dir.join(&det).exists().then_some(det),
        estimators: (1..=m_max)
            .map(|m| (m, estimator_file(bits, m)))
            .filter(|(_, f)| dir.join(f).exists())
            .collect(),
    };
    write_file(&dir.join(bundle_file(bits)), &bundle.to_text())
}

pub fn train(args: &TrainArgs) -> Result<String> {
    let (lp, _) = dataset_paths(&args.data);
    if !lp.exists() {
        return Err(HarnessError::Data(format!("dataset {} not found", lp.display())));
    }
    let (header, examples) = load_dataset(&args.data)?;
    if examples.is_empty() {
        return Err(HarnessError::Data("dataset is empty".into()));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| HarnessError::io(&args.out, e))?;
    let bits = header.bits;
    let mut report = String::new();
    let counts: Vec<usize> = if args.counts.is_empty() {
        let mut c: Vec<usize> = examples.iter().map(|e| e.label.m()).collect();
        c.sort_unstable();
        c.dedup();
        c
    } else {
        args.counts.clone()
    };
    let subset = |m: usize| -> Vec<LabeledExample> { examples.iter().filter(|e| e.label.m() == m).cloned().collect() };
    match args.task {
        Task::Detection => {
            let (model, log) = train_detection(&examples, header.m_max, bits, &args.cfg)?;
            let file = detection_file(bits);
            model.save(&args.out.join(&file))?;
            let log_name = write_log(&args.out, &file, &log)?;
            writeln!(report, "{file}: {} epochs, log {log_name}", log.records.len()).ok();
        }
        Task::Estimator => {
            for m in counts {
                let data = subset(m);
                if data.is_empty() {
                    return Err(HarnessError::Data(format!("no examples with m = {m}")));
                }
                let mut init = SinusoidEstimator::new(m, bits, header.n, args.cfg.seed)?;
                init.set_residual_mode(args.residual);
                let (model, log) = fit_estimator(init, &data, &args.cfg)?;
                let file = estimator_file(bits, m);
                model.save(&args.out.join(&file))?;
                let log_name = write_log(&args.out, &file, &log)?;
                writeln!(report, "{file}: {} examples, {} epochs, log {log_name}", data.len(), log.records.len()).ok();
            }
        }
        Task::Baseline => {
            for m in counts {
                let data = subset(m);
                if data.is_empty() {
                    return Err(HarnessError::Data(format!("no examples with m = {m}")));
                }
                let (model, log) = train_baseline(args.kind, &data, m, bits, &args.cfg)?;
                let file = baseline_file(args.kind, bits, m);
                model.save(&args.out.join(&file))?;
                let log_name = write_log(&args.out, &file, &log)?;
                writeln!(report, "{file}: {} examples, {} epochs, log {log_name}", data.len(), log.records.len()).ok();
            }
        }
    }
    refresh_manifest(&args.out, bits, header.n, header.m_max)?;
    Ok(report)
}

/// Writes `text` to `out` when given and returns what to print.
fn emit(text: String, out: Option<&Path>) -> Result<String> {
    match out {
        Some(p) => {
            write_file(p, &text)?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}

pub fn eval(plan: &EvalPlan, out: Option<&Path>) -> Result<String> {
    emit(to_csv(&run_eval(plan)?)?, out)
}

pub fn ood(plan: &EvalPlan, m: usize, out: Option<&Path>) -> Result<String> {
    if m < 1 || m > plan.m_max {
        return usage(format!("m = {m} outside 1..={}", plan.m_max));
    }
    emit(to_csv(&run_ood(plan, m)?)?, out)
}

pub const THRESHOLD_HEADER: &str = "quantity,m,value,value_db";

/// Threshold table: detection estimate and loss, frequency thresholds per
/// `m`, amplitude and phase thresholds with their constant estimators.
pub fn thresholds(shared: &Shared) -> Result<String> {
    let t = ThresholdSet::compute(shared.m_max, shared.n)?;
    let mut s = format!("{THRESHOLD_HEADER}\n");
    let mut row = |q: &str, m: Option<usize>, v: f64| {
        let m = m.map(|m| m.to_string()).unwrap_or_default();
        writeln!(s, "{q},{m},{v},{}", to_db(v)).ok();
    };
    row("detection_estimate", None, t.detection_estimator);
    row("detection_loss", None, t.detection_loss_value);
    for (i, f) in t.freq_thresholds.iter().enumerate() {
        row("freq_mse", Some(i + 1), *f);
    }
    row("amp_mse", None, t.amp_threshold);
    row("amp_mean", None, t.mean_amp);
    row("phase_mse", None, t.phase_threshold);
    row("phase_mean", None, t.mean_phase);
    Ok(s)
}
