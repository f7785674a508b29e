//! Command-line front end.
//!
//! Every subcommand is a pure function of its flags: seeds are flags, there is
//! no wall-clock or OS entropy, and machine-readable output (JSON, JSONL, CSV)
//! is separated from the human summaries printed to standard error.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{build_preference_dataset, ContrastiveMode, Dataset, WorldConfig};
use crate::digest::{bytes_hash, config_hash};
use crate::domain::{HyperParams, SymmetricSample};
use crate::error::Error;
use crate::partition::{compare_vco_gradients, GroundTruthReward, PartitionRecord};
use crate::policy::{FeatureMap, PolicyLayout, PolicyParams};
use crate::trainer::{
    evaluate_contrastive_accuracy, evaluate_hallucination_rate, summarize, train, Objective, OptimizerKind,
    TrainConfig, TrainSummary,
};
use crate::verify::{run_battery, BatteryConfig, LossId};

/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "SYMPO_THREADS";

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_HEADER: &str = "cell,loss,hallucination_rate,contrastive_accuracy";

#[derive(Debug, Parser)]
#[command(name = "symmpo", version, about = "Symmetric multimodal preference optimization lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic preference dataset.
    GenData(GenDataArgs),
    /// Train a policy on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Per-sample partition offsets and contrastive gradient coefficients.
    PartitionReport(PartitionArgs),
    /// Train over a grid of contrastive modes and hyperparameters.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Similar,
    Black,
    Cropped,
    Noisy,
    Synthetic,
}

impl From<ModeArg> for ContrastiveMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Similar => ContrastiveMode::Similar,
            ModeArg::Black => ContrastiveMode::Black,
            ModeArg::Cropped => ContrastiveMode::Cropped,
            ModeArg::Noisy => ContrastiveMode::Noisy,
            ModeArg::Synthetic => ContrastiveMode::Synthetic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ObjectiveArg {
    Dpo,
    Vco,
    VcoStar,
    Symmpo,
    SymmpoWoPair,
    SymmpoWoMargin,
    SymmpoWoAncpo,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Dpo => Objective::Dpo,
            ObjectiveArg::Vco => Objective::Vco,
            ObjectiveArg::VcoStar => Objective::VcoStar,
            ObjectiveArg::Symmpo => Objective::Symmpo,
            ObjectiveArg::SymmpoWoPair => Objective::SymmpoWoPair,
            ObjectiveArg::SymmpoWoMargin => Objective::SymmpoWoMargin,
            ObjectiveArg::SymmpoWoAncpo => Objective::SymmpoWoAncpo,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblateArg {
    Pair,
    Margin,
    Ancpo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FeatureMapArg {
    Concat,
    Gated,
}

impl From<FeatureMapArg> for FeatureMap {
    fn from(f: FeatureMapArg) -> Self {
        match f {
            FeatureMapArg::Concat => FeatureMap::Concat,
            FeatureMapArg::Gated => FeatureMap::PromptGated,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Heldout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum LossArg {
    DpoM,
    Vco,
    VcoStar,
    Pair,
    Margin,
    Ancpo,
    Symmpo,
}

impl From<LossArg> for LossId {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::DpoM => LossId::DpoM,
            LossArg::Vco => LossId::Vco,
            LossArg::VcoStar => LossId::VcoStar,
            LossArg::Pair => LossId::Pair,
            LossArg::Margin => LossId::Margin,
            LossArg::Ancpo => LossId::Ancpo,
            LossArg::Symmpo => LossId::Symmpo,
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct WorldArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 12)]
    pub d_img: usize,
    #[arg(long, default_value_t = 4)]
    pub n_prompts: usize,
    #[arg(long, default_value_t = 3)]
    pub q: usize,
    #[arg(long, default_value_t = 512)]
    pub n_images: usize,
    #[arg(long, default_value_t = 1)]
    pub flip_count: usize,
    #[arg(long, value_enum, default_value = "similar")]
    pub contrastive_mode: ModeArg,
    #[arg(long, default_value_t = 0.8)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 2)]
    pub synthetic_drop: usize,
    #[arg(long, default_value_t = 0.1)]
    pub heldout_fraction: f64,
}

impl WorldArgs {
    fn config(&self) -> WorldConfig {
        WorldConfig {
            d_img: self.d_img,
            n_prompts: self.n_prompts,
            q: self.q,
            n_images: self.n_images,
            flip_count: self.flip_count,
            contrastive_mode: self.contrastive_mode.into(),
            noise_sigma: self.noise_sigma,
            synthetic_drop: self.synthetic_drop,
            heldout_fraction: self.heldout_fraction,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Hyperparameter flags. Unset flags fall back to the toy defaults, or to the
/// published ones with `--paper-defaults`.
#[derive(Clone, Debug, Args)]
pub struct HyperArgs {
    /// Start from the published hyperparameters (lr 5e-6, which barely moves a
    /// toy policy) instead of the toy defaults (lr 0.1).
    #[arg(long)]
    pub paper_defaults: bool,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Scale the margin term by beta.
    #[arg(long)]
    pub margin_uses_beta: bool,
}

impl HyperArgs {
    fn hyper(&self) -> HyperParams {
        let base = if self.paper_defaults {
            HyperParams::paper()
        } else {
            HyperParams::toy()
        };
        HyperParams {
            beta: self.beta.unwrap_or(base.beta),
            delta: self.delta.unwrap_or(base.delta),
            lambda: self.lambda.unwrap_or(base.lambda),
            gamma: self.gamma.unwrap_or(base.gamma),
            eta: self.eta.unwrap_or(base.eta),
            lr: self.lr.unwrap_or(base.lr),
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            margin_uses_beta: self.margin_uses_beta || base.margin_uses_beta,
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct TrainOptions {
    #[arg(long, value_enum, default_value = "symmpo")]
    pub objective: ObjectiveArg,
    /// Remove one regularizer from symmpo; same as `--objective symmpo_wo_<c>`.
    #[arg(long, value_enum, conflicts_with = "objective")]
    pub ablate: Option<AblateArg>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, value_enum, default_value = "sgd")]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.9)]
    pub adam_beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub adam_beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = 0)]
    pub shuffle_seed: u64,
    /// Evaluate every N steps (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
    /// Ground-truth reward scale inside the vco_star partition function.
    #[arg(long, default_value_t = 1.0)]
    pub reward_scale: f64,
    #[arg(long, value_enum, default_value = "gated")]
    pub feature_map: FeatureMapArg,
    /// Reference policy checkpoint (default: uniform, all-zero weights).
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

impl TrainOptions {
    fn config(&self) -> TrainConfig {
        let objective = match self.ablate {
            Some(AblateArg::Pair) => Objective::SymmpoWoPair,
            Some(AblateArg::Margin) => Objective::SymmpoWoMargin,
            Some(AblateArg::Ancpo) => Objective::SymmpoWoAncpo,
            None => self.objective.into(),
        };
        TrainConfig {
            objective,
            hyper: self.hyper.hyper(),
            optimizer: match self.optimizer {
                OptimizerArg::Sgd => OptimizerKind::Sgd,
                OptimizerArg::Adam => OptimizerKind::Adam,
            },
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            shuffle_seed: self.shuffle_seed,
            eval_every: self.eval_every,
            reward_scale: self.reward_scale,
            feature_map: self.feature_map.into(),
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOptions,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Reference policy (default: uniform with the checkpoint's layout).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "heldout")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
}

#[derive(Clone, Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    /// Restrict to these losses (repeatable; default: all).
    #[arg(long, value_enum)]
    pub loss: Vec<LossArg>,
    /// Write the JSONL report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct PartitionArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Reference policy checkpoint; it determines Z and c.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Policy whose log-ratios give u (default: the reference, so u = 0).
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub reward_scale: f64,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    /// Write records here instead of standard output; a `.meta.json` sidecar
    /// with the config hash and the histogram of c is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    #[command(flatten)]
    pub train: TrainOptions,
    /// Contrastive modes to sweep.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "similar")]
    pub modes: Vec<ModeArg>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,0.9")]
    pub lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.001,0.0001,0.00001")]
    pub gammas: Vec<f64>,
    /// Learning rates. The defaults are sized for large models and barely
    /// move a toy policy; pass e.g. `--lrs 0.1,0.05` for visible effects.
    #[arg(long, value_delimiter = ',', default_value = "0.00005,0.000005,0.0000005")]
    pub lrs: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses arguments, runs the command and maps failures to exit codes:
/// 2 for bad inputs, 1 for failed computations or checks.
pub fn main_entry() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let input = e
                .chain()
                .any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_input_error))
                || e.downcast_ref::<clap::Error>().is_some();
            ExitCode::from(if input { 2 } else { 1 })
        }
    }
}

fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .try_init();
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")?;
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => cmd_train(&a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => cmd_eval(&a).map(|_| ExitCode::SUCCESS),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::PartitionReport(a) => cmd_partition_report(&a).map(|_| ExitCode::SUCCESS),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| ExitCode::SUCCESS),
    }
}

fn load_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<PolicyParams> {
    PolicyParams::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_gen_data(args: &GenDataArgs) -> anyhow::Result<Dataset> {
    let cfg = args.world.config();
    let ds = build_preference_dataset(&cfg)?;
    ds.save(&args.out)
        .with_context(|| format!("writing dataset to {}", args.out.display()))?;
    eprintln!(
        "gen-data: {} train + {} held-out samples ({} dropped) -> {} [config {}]",
        ds.train.len(),
        ds.heldout.len(),
        ds.drops.dropped(),
        args.out.display(),
        ds.config_hash()
    );
    Ok(ds)
}

/// Identity of a training run: dataset, effective objective and reference.
#[derive(Serialize)]
struct RunKey<'a> {
    dataset: &'a str,
    train: &'a str,
    reference: Option<&'a str>,
}

fn resolve_reference(ds: &Dataset, opts: &TrainOptions) -> anyhow::Result<(PolicyParams, Option<String>)> {
    match &opts.reference {
        None => Ok((
            PolicyParams::zeros(PolicyLayout::new(ds.shape(), opts.feature_map.into())),
            None,
        )),
        Some(path) => {
            let bytes = fs::read(path).with_context(|| format!("reading reference {}", path.display()))?;
            let reference = PolicyParams::from_checkpoint_bytes(&bytes)
                .with_context(|| format!("loading reference {}", path.display()))?;
            if reference.layout().world != ds.shape() {
                return Err(Error::Config("reference checkpoint was built for a different world".into()).into());
            }
            if reference.layout().feature_map != FeatureMap::from(opts.feature_map) {
                return Err(Error::Config(format!(
                    "reference checkpoint uses the {} feature map; pass --feature-map {}",
                    reference.layout().feature_map.name(),
                    reference.layout().feature_map.name()
                ))
                .into());
            }
            Ok((reference, Some(bytes_hash(&bytes))))
        }
    }
}

/// Trains and writes checkpoint, metrics and summary into `out`.
fn run_training(ds: &Dataset, opts: &TrainOptions, cfg: &TrainConfig, out: &Path) -> anyhow::Result<TrainSummary> {
    let (reference, reference_hash) = resolve_reference(ds, opts)?;
    let dataset_hash = ds.config_hash();
    let train_hash = cfg.canonical_hash();
    let hash = config_hash(&RunKey {
        dataset: &dataset_hash,
        train: &train_hash,
        reference: reference_hash.as_deref(),
    });
    let outcome = train(ds, cfg, &reference)?;
    let summary = summarize(ds, cfg, &outcome, &reference, hash.clone())?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    outcome.params.save(&out.join(CHECKPOINT_FILE))?;
    let mut metrics = BufWriter::new(fs::File::create(out.join(METRICS_FILE))?);
    writeln!(metrics, "{}", serde_json::json!({ "kind": "run", "config_hash": hash }))?;
    outcome.log.write_jsonl(metrics)?;
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<TrainSummary> {
    let ds = load_dataset(&args.data)?;
    let cfg = args.train.config();
    let summary = run_training(&ds, &args.train, &cfg, &args.out)?;
    println!("{}", serde_json::to_string(&summary)?);
    eprintln!(
        "train [{}]: loss {:.6}, hallucination {:.4}, contrastive accuracy {:.4} -> {}",
        cfg.objective,
        summary.final_loss,
        summary.hallucination_rate,
        summary.contrastive_accuracy,
        args.out.display()
    );
    Ok(summary)
}

fn split_of(ds: &Dataset, split: SplitArg) -> anyhow::Result<&[SymmetricSample]> {
    let samples = match split {
        SplitArg::Train => &ds.train,
        SplitArg::Heldout => &ds.heldout,
    };
    if samples.is_empty() {
        bail!(Error::Usage(format!("the {split:?} split is empty").to_lowercase()));
    }
    Ok(samples)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub hallucination_rate: f64,
    pub mention_hallucination_rate: f64,
    pub contrastive_accuracy: f64,
    pub n: usize,
    pub config_hash: String,
}

pub fn cmd_eval(args: &EvalArgs) -> anyhow::Result<EvalReport> {
    let ds = load_dataset(&args.data)?;
    let params = load_checkpoint(&args.checkpoint)?;
    let reference = match &args.reference {
        Some(p) => load_checkpoint(p)?,
        None => PolicyParams::zeros(*params.layout()),
    };
    if params.layout().world != ds.shape() || reference.layout() != params.layout() {
        bail!(Error::Config(
            "checkpoint, reference and dataset disagree on the world layout".into()
        ));
    }
    let split = split_of(&ds, args.split)?;
    let hp = HyperParams {
        beta: args.beta,
        ..HyperParams::toy()
    };
    hp.validate()?;
    let h = evaluate_hallucination_rate(&params, split)?;
    let report = EvalReport {
        hallucination_rate: h.response_level,
        mention_hallucination_rate: h.mention_level,
        contrastive_accuracy: evaluate_contrastive_accuracy(&params, &reference, split, &hp)?,
        n: split.len(),
        config_hash: config_hash(&(
            ds.config_hash(),
            bytes_hash(&params.to_checkpoint_bytes()),
            bytes_hash(&reference.to_checkpoint_bytes()),
            format!("{:?}", args.split),
            args.beta,
        )),
    };
    println!("{}", serde_json::to_string(&report)?);
    eprintln!(
        "eval: hallucination {:.4} (mention {:.4}), contrastive accuracy {:.4} on {} samples",
        report.hallucination_rate, report.mention_hallucination_rate, report.contrastive_accuracy, report.n
    );
    Ok(report)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> anyhow::Result<ExitCode> {
    let mut losses: Vec<LossId> = args.loss.iter().map(|&l| l.into()).collect();
    if losses.is_empty() {
        losses = LossId::ALL.to_vec();
    }
    losses.dedup();
    let cfg = BatteryConfig {
        seed: args.seed,
        instances: args.instances,
        step: args.step,
        tolerance: args.tolerance,
        losses,
    };
    let reports = run_battery(&cfg)?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    match &args.out {
        Some(p) => fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    let failures: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
    for id in &cfg.losses {
        let mine = reports.iter().filter(|r| r.loss_id == *id);
        let worst = mine.clone().map(|r| r.max_rel_err).fold(0.0, f64::max);
        let failed = mine.filter(|r| !r.passed).count();
        eprintln!(
            "gradcheck {:<9} {} / {} failed, worst relative error {worst:.3e}",
            id.name(),
            failed,
            cfg.instances
        );
    }
    if failures.is_empty() {
        eprintln!(
            "gradcheck: all {} checks passed at tolerance {:e}",
            reports.len(),
            cfg.tolerance
        );
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "gradcheck: {} of {} checks failed at tolerance {:e}",
            failures.len(),
            reports.len(),
            cfg.tolerance
        );
        Ok(ExitCode::from(1))
    }
}

/// Histogram of `c` written next to partition records.
#[derive(Debug, Serialize, Deserialize)]
pub struct PartitionMeta {
    pub config_hash: String,
    pub n: usize,
    pub c_min: f64,
    pub c_max: f64,
    pub c_mean_abs: f64,
    /// Counts over ten equal-width bins spanning `[c_min, c_max]`.
    pub c_histogram: Vec<usize>,
}

fn histogram(values: &[f64], bins: usize) -> (f64, f64, Vec<usize>) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0; bins];
    for &v in values {
        let b = if hi > lo {
            (((v - lo) / (hi - lo)) * bins as f64) as usize
        } else {
            0
        };
        counts[b.min(bins - 1)] += 1;
    }
    (lo, hi, counts)
}

pub fn cmd_partition_report(args: &PartitionArgs) -> anyhow::Result<Vec<PartitionRecord>> {
    let ds = load_dataset(&args.data)?;
    let ref_bytes = fs::read(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let reference = PolicyParams::from_checkpoint_bytes(&ref_bytes)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let policy = match &args.policy {
        Some(p) => load_checkpoint(p)?,
        None => reference.clone(),
    };
    if reference.layout().world != ds.shape() || policy.layout() != reference.layout() {
        bail!(Error::Config(
            "checkpoints and dataset disagree on the world layout".into()
        ));
    }
    let reward = GroundTruthReward::new(args.reward_scale)?;
    let hp = HyperParams {
        beta: args.beta,
        ..HyperParams::toy()
    };
    hp.validate()?;
    let split = split_of(&ds, args.split)?;
    let reports = compare_vco_gradients(split, &policy, &reference, &reward, &hp)?;
    let records: Vec<PartitionRecord> = reports.iter().map(PartitionRecord::from).collect();

    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    let cs: Vec<f64> = records.iter().map(|r| r.c).collect();
    let (c_min, c_max, c_histogram) = histogram(&cs, 10);
    let meta = PartitionMeta {
        config_hash: config_hash(&(
            ds.config_hash(),
            bytes_hash(&ref_bytes),
            bytes_hash(&policy.to_checkpoint_bytes()),
            args.reward_scale,
            args.beta,
            format!("{:?}", args.split),
        )),
        n: records.len(),
        c_min,
        c_max,
        c_mean_abs: cs.iter().map(|c| c.abs()).sum::<f64>() / cs.len() as f64,
        c_histogram,
    };
    match &args.out {
        Some(path) => {
            fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
            let mut sidecar = path.as_os_str().to_owned();
            sidecar.push(".meta.json");
            write_json(Path::new(&sidecar), &meta)?;
        }
        None => print!("{text}"),
    }
    eprintln!(
        "partition-report: {} records, c in [{:.4e}, {:.4e}], mean |c| {:.4e}, histogram {:?} [config {}]",
        meta.n, meta.c_min, meta.c_max, meta.c_mean_abs, meta.c_histogram, meta.config_hash
    );
    Ok(records)
}

#[derive(Clone, Debug, Serialize)]
struct Cell {
    mode: ContrastiveMode,
    lambda: f64,
    gamma: f64,
    lr: f64,
}

impl Cell {
    fn label(&self) -> String {
        format!(
            "mode={};lambda={};gamma={};lr={}",
            self.mode, self.lambda, self.gamma, self.lr
        )
    }
}

/// Runs every grid cell (skipping cells whose summary already exists with a
/// matching config hash) and writes the CSV in grid order.
pub fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<Vec<(String, TrainSummary)>> {
    if args.modes.is_empty() || args.lambdas.is_empty() || args.gammas.is_empty() || args.lrs.is_empty() {
        bail!(Error::Usage("every sweep grid needs at least one value".into()));
    }
    let mut modes: Vec<ContrastiveMode> = Vec::new();
    for m in &args.modes {
        let m = ContrastiveMode::from(*m);
        if !modes.contains(&m) {
            modes.push(m);
        }
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut datasets = Vec::new();
    for &mode in &modes {
        let cfg = WorldConfig {
            contrastive_mode: mode,
            ..args.world.config()
        };
        let dir = args.out.join("data").join(mode.name());
        let ds = match Dataset::load(&dir) {
            Ok(ds) if ds.config == cfg => ds,
            _ => {
                let ds = build_preference_dataset(&cfg)?;
                ds.save(&dir)?;
                ds
            }
        };
        datasets.push((mode, ds));
    }

    let mut cells = Vec::new();
    for &mode in &modes {
        for &lambda in &args.lambdas {
            for &gamma in &args.gammas {
                for &lr in &args.lrs {
                    cells.push(Cell {
                        mode,
                        lambda,
                        gamma,
                        lr,
                    });
                }
            }
        }
    }

    let results: Vec<anyhow::Result<(String, TrainSummary)>> = cells
        .par_iter()
        .enumerate()
        .map(|(i, cell)| {
            let ds = &datasets
                .iter()
                .find(|(m, _)| *m == cell.mode)
                .expect("dataset per mode")
                .1;
            let mut opts = args.train.clone();
            opts.hyper.lambda = Some(cell.lambda);
            opts.hyper.gamma = Some(cell.gamma);
            opts.hyper.lr = Some(cell.lr);
            let cfg = opts.config();
            let dir = args.out.join("cells").join(format!("{i:04}"));
            if let Ok(text) = fs::read_to_string(dir.join(SUMMARY_FILE)) {
                if let Ok(done) = serde_json::from_str::<TrainSummary>(&text) {
                    let (_, reference_hash) = resolve_reference(ds, &opts)?;
                    let expected = config_hash(&RunKey {
                        dataset: &ds.config_hash(),
                        train: &cfg.canonical_hash(),
                        reference: reference_hash.as_deref(),
                    });
                    if done.config_hash == expected && dir.join(CHECKPOINT_FILE).exists() {
                        info!("sweep cell {i} already complete");
                        return Ok((cell.label(), done));
                    }
                }
            }
            let summary = run_training(ds, &opts, &cfg, &dir)?;
            eprintln!(
                "sweep cell {i} {}: loss {:.6}, hallucination {:.4}, contrastive accuracy {:.4}",
                cell.label(),
                summary.final_loss,
                summary.hallucination_rate,
                summary.contrastive_accuracy
            );
            Ok((cell.label(), summary))
        })
        .collect();
    let results = results.into_iter().collect::<anyhow::Result<Vec<_>>>()?;

    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for (label, s) in &results {
        csv.push_str(&format!(
            "{label},{},{},{}\n",
            s.final_loss, s.hallucination_rate, s.contrastive_accuracy
        ));
    }
    fs::write(args.out.join(SWEEP_CSV), csv)?;
    let hashes: Vec<&str> = results.iter().map(|(_, s)| s.config_hash.as_str()).collect();
    write_json(
        &args.out.join("sweep.json"),
        &serde_json::json!({ "config_hash": config_hash(&hashes), "cells": results.len() }),
    )?;
    eprintln!(
        "sweep: {} cells -> {}",
        results.len(),
        args.out.join(SWEEP_CSV).display()
    );
    Ok(results)
}
