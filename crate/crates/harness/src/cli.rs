//! Argument definitions and their resolution against a config file.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use qsine_core::classical::{Criterion, PeakMode, PeriodogramOptions};
use qsine_core::FreqMode;
use signalnet::{BaselineKind, ResidualMode, TrainConfig};

use crate::commands::{self, GenerateArgs, Split, Task, TrainArgs};
use crate::config::{snr_grid, ConfigFile, List, Shared};
use crate::error::{usage, Result};
use crate::eval::{Algorithm, EvalPlan, DEFAULT_ALGORITHMS};
use crate::records::parse_freq_mode;

#[derive(Debug, Parser)]
#[command(name = "qsine", version, about = "Quantized multi-sinusoid detection and estimation")]
pub struct Cli {
    #[command(flatten)]
    pub shared: SharedFlags,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct SharedFlags {
    /// Root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Comma-separated quantizer resolutions.
    #[arg(long, global = true)]
    pub bits: Option<List<u32>>,
    /// Frame length.
    #[arg(long, global = true, alias = "N")]
    pub n: Option<usize>,
    #[arg(long = "m-max", global = true, alias = "M")]
    pub m_max: Option<usize>,
    #[arg(long = "snr-min", global = true, allow_hyphen_values = true)]
    pub snr_min: Option<f64>,
    #[arg(long = "snr-max", global = true, allow_hyphen_values = true)]
    pub snr_max: Option<f64>,
    #[arg(long = "snr-step", global = true)]
    pub snr_step: Option<f64>,
    /// `key = value` file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a labeled dataset per resolution.
    Generate(GenerateFlags),
    /// Train detection, estimator or baseline networks from a dataset.
    Train(TrainFlags),
    /// SNR sweep over trained models and classical methods.
    Eval(EvalFlags),
    /// In-distribution versus uniform-frequency comparison.
    Ood(OodFlags),
    /// Print the threshold table.
    Thresholds,
}

#[derive(Debug, Args)]
pub struct GenerateFlags {
    #[arg(long)]
    pub count: Option<usize>,
    /// Fixed sinusoid count.
    #[arg(long)]
    pub m: Option<usize>,
    /// Fixed SNR in dB.
    #[arg(long, allow_hyphen_values = true)]
    pub snr: Option<f64>,
    /// `in` or `ood`.
    #[arg(long = "freq-mode")]
    pub freq_mode: Option<String>,
    /// `train`, `val` or `test`.
    #[arg(long)]
    pub split: Option<Split>,
    /// Output stem.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Dataset stem, as written by `generate` (including `.b<bits>`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `detection`, `estimator` or `baseline`.
    #[arg(long)]
    pub task: Option<Task>,
    /// Sinusoid counts to train (estimator and baseline tasks).
    #[arg(long)]
    pub m: Option<List<usize>>,
    /// `mlp` or `conv`.
    #[arg(long)]
    pub kind: Option<BaselineKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long = "val-fraction")]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long = "lr-patience")]
    pub lr_patience: Option<usize>,
    #[arg(long = "lr-factor")]
    pub lr_factor: Option<f64>,
    /// `stop` or `differentiable`.
    #[arg(long)]
    pub residual: Option<ResidualMode>,
    /// Model directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalFlags {
    /// Model directory.
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long)]
    pub algorithms: Option<List<Algorithm>>,
    /// Sinusoid counts for the fixed-count sweep.
    #[arg(long)]
    pub m: Option<List<usize>>,
    /// Also run the unknown-count sweep.
    #[arg(long)]
    pub joint: bool,
    /// Frames per cell.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Periodogram transform length (power of two, at least `n`).
    #[arg(long)]
    pub nfft: Option<usize>,
    /// Periodogram peak selection: `guarded` or `top`.
    #[arg(long = "peak-mode")]
    pub peak_mode: Option<PeakMode>,
    /// Keeps only the classical detectors using these criteria.
    #[arg(long)]
    pub criterion: Option<List<Criterion>>,
    /// AIC/MDL subvector length.
    #[arg(long = "subvector-len")]
    pub subvector_len: Option<usize>,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OodFlags {
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const DEFAULT_COUNT: usize = 50_000;
pub const DEFAULT_TRIALS: usize = 8_000;

fn resolve_shared(f: &SharedFlags, c: &ConfigFile) -> Result<Shared> {
    let d = Shared::default();
    let snr_min = c.pick_or(f.snr_min, "snr-min", d.snr_min)?;
    let snr_max = c.pick_or(f.snr_max, "snr-max", d.snr_max)?;
    let step = c.pick_or(f.snr_step, "snr-step", 1.0)?;
    let bits = c.pick_or(f.bits.clone(), "bits", List(d.bits))?.0;
    let s = Shared {
        seed: c.pick_or(f.seed, "seed", d.seed)?,
        bits,
        n: c.pick_or(f.n, "n", d.n)?,
        m_max: c.pick_or(f.m_max, "m-max", d.m_max)?,
        snr_min,
        snr_max,
        snr_grid: snr_grid(snr_min, snr_max, step)?,
    };
    if s.m_max == 0 || s.n == 0 {
        return usage("n and m-max must be positive");
    }
    Ok(s)
}

fn freq_mode(text: &str) -> Result<FreqMode> {
    parse_freq_mode(text).map_or_else(|| usage(format!("unknown frequency mode '{text}'")), Ok)
}

fn require<T>(v: Option<T>, name: &str) -> Result<T> {
    v.map_or_else(|| usage(format!("--{name} is required")), Ok)
}

fn eval_plan(s: &Shared, models: Option<PathBuf>, trials: usize) -> EvalPlan {
    EvalPlan {
        seed: s.seed,
        bits: s.bits.clone(),
        n: s.n,
        m_max: s.m_max,
        snr_grid: s.snr_grid.clone(),
        algorithms: DEFAULT_ALGORITHMS.to_vec(),
        counts: (1..=s.m_max).collect(),
        joint: false,
        trials,
        models,
        periodogram: PeriodogramOptions::default(),
        subvector_len: None,
    }
}

/// Resolves every setting and runs the subcommand. Returns the text for
/// stdout.
pub fn run(cli: Cli) -> Result<String> {
    let config = match &cli.shared.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let c = &config;
    let shared = resolve_shared(&cli.shared, c)?;
    match cli.command {
        Command::Generate(g) => {
            let mode = c.pick::<String>(g.freq_mode, "freq-mode")?;
            let args = GenerateArgs {
                count: c.pick_or(g.count, "count", DEFAULT_COUNT)?,
                m: c.pick(g.m, "m")?,
                snr: c.pick(g.snr, "snr")?,
                freq_mode: mode.as_deref().map_or(Ok(FreqMode::InDistribution), freq_mode)?,
                split: c.pick_or(g.split, "split", Split::Train)?,
                out: require(c.pick(g.out, "out")?, "out")?,
                shared,
            };
            if args.count == 0 {
                return usage("--count must be positive");
            }
            if let Some(m) = args.m {
                if m < 1 || m > args.shared.m_max {
                    return usage(format!("--m must be in 1..={}", args.shared.m_max));
                }
            }
            commands::generate(&args)
        }
        Command::Train(t) => {
            let d = TrainConfig::default();
            let cfg = TrainConfig {
                lr: c.pick_or(t.lr, "lr", d.lr)?,
                batch: c.pick_or(t.batch, "batch", d.batch)?,
                epochs: c.pick_or(t.epochs, "epochs", d.epochs)?,
                val_fraction: c.pick_or(t.val_fraction, "val-fraction", d.val_fraction)?,
                patience: c.pick_or(t.patience, "patience", d.patience)?,
                lr_factor: c.pick_or(t.lr_factor, "lr-factor", d.lr_factor)?,
                lr_patience: c.pick_or(t.lr_patience, "lr-patience", d.lr_patience)?,
                seed: shared.seed,
            };
            if let Err(e) = cfg.validate() {
                return usage(e.to_string());
            }
            let args = TrainArgs {
                data: require(c.pick(t.data, "data")?, "data")?,
                task: require(c.pick(t.task, "task")?, "task")?,
                counts: c.pick(t.m, "m")?.map(|l| l.0).unwrap_or_default(),
                kind: c.pick_or(t.kind, "kind", BaselineKind::Mlp)?,
                residual: c.pick_or(t.residual, "residual", ResidualMode::default())?,
                cfg,
                out: require(c.pick(t.out, "out")?, "out")?,
            };
            commands::train(&args)
        }
        Command::Eval(e) => {
            let trials = c.pick_or(e.trials, "trials", DEFAULT_TRIALS)?;
            let mut plan = eval_plan(&shared, c.pick(e.models, "models")?, trials);
            if let Some(a) = c.pick(e.algorithms, "algorithms")? {
                plan.algorithms = a.0;
            }
            if let Some(m) = c.pick(e.m, "m")? {
                plan.counts = m.0;
            }
            if plan.counts.iter().any(|&m| m < 1 || m > shared.m_max) {
                return usage(format!("--m values must be in 1..={}", shared.m_max));
            }
            plan.joint = e.joint || c.pick::<bool>(None, "joint")?.unwrap_or(false);
            if let Some(nfft) = c.pick(e.nfft, "nfft")? {
                if nfft < shared.n || !nfft.is_power_of_two() {
                    return usage("--nfft must be a power of two and at least n");
                }
                plan.periodogram.nfft = nfft;
            }
            if let Some(mode) = c.pick(e.peak_mode, "peak-mode")? {
                plan.periodogram.peak_mode = mode;
            }
            if let Some(l) = c.pick(e.subvector_len, "subvector-len")? {
                if l <= shared.m_max || l >= shared.n {
                    return usage(format!("--subvector-len must be in {}..{}", shared.m_max + 1, shared.n));
                }
                plan.subvector_len = Some(l);
            }
            if let Some(keep) = c.pick(e.criterion, "criterion")? {
                plan.algorithms.retain(|a| a.criterion().is_none_or(|k| keep.0.contains(&k)));
            }
            let out = c.pick(e.out, "out")?;
            commands::eval(&plan, out.as_deref())
        }
        Command::Ood(o) => {
            let trials = c.pick_or(o.trials, "trials", DEFAULT_TRIALS)?;
            let plan = eval_plan(&shared, c.pick(o.models, "models")?, trials);
            let m = c.pick_or(o.m, "m", 2)?;
            let out = c.pick(o.out, "out")?;
            commands::ood(&plan, m, out.as_deref())
        }
        Command::Thresholds => commands::thresholds(&shared),
    }
}
