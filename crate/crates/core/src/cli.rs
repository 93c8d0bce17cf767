//! The `compound` command-line tool.
//!
//! Every subcommand also reads defaults from an optional `key = value` file
//! given with `--config`; keys are long flag names. Flags on the command line
//! win over the file, which wins over built-in defaults.
//!
//! Exit codes: 0 on success, 2 for usage, input and IO errors, 3 when
//! training diverges (for `sweep`: when no point succeeds).

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgAction, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::baselines::{baseline_rows, baseline_tsv, BaselineKind, BaselineRow};
use crate::data::{split_dataset, synthesize_dataset, Dataset, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::SoftRankConfig;
use crate::nn::{AdamaxConfig, StraightThrough};
use crate::policy::{selection_pgm, DeterministicPolicy};
use crate::sweep::{alpha_grid, pareto_filter, points_tsv, sweep_alphas, SweepRun, TradeoffPoint};
use crate::train::{prepare, train_system, DeterminizeBy, LossKind, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "compound", version, about = "Train and evaluate compound retrieval systems")]
pub struct Cli {
    /// File of `key = value` lines supplying defaults for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Write a synthetic JSON-Lines dataset.
    #[command(args_override_self = true)]
    Synth(SynthArgs),
    /// Train one compound system.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Train one system per trade-off weight and keep the Pareto front.
    #[command(args_override_self = true)]
    Sweep(SweepArgs),
    /// Evaluate the first-stage, pointwise and PRP re-rankers over a top-K grid.
    #[command(args_override_self = true)]
    Baselines(BaselinesArgs),
    /// Render a deterministic policy file as a PGM bitmap.
    #[command(args_override_self = true)]
    ExportPolicy(ExportPolicyArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Sweep(_) => "sweep",
            Command::Baselines(_) => "baselines",
            Command::ExportPolicy(_) => "export-policy",
        }
    }
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = SynthConfig::default().k0)]
    pub k0: usize,
    #[arg(long, default_value_t = SynthConfig::default().v_max)]
    pub v_max: u32,
    #[arg(long, default_value_t = SynthConfig::default().n_queries)]
    pub queries: usize,
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().pointwise_sharpness)]
    pub pointwise_sharpness: f64,
    #[arg(long, default_value_t = SynthConfig::default().point_noise)]
    pub point_noise: f64,
    #[arg(long, default_value_t = SynthConfig::default().pair_sharpness)]
    pub pair_sharpness: f64,
    #[arg(long, default_value_t = SynthConfig::default().pair_noise)]
    pub pair_noise: f64,
    #[arg(long, default_value_t = SynthConfig::default().order_bias)]
    pub order_bias: f64,
    #[arg(long, default_value_t = SynthConfig::default().first_stage_quality)]
    pub first_stage_quality: f64,
    #[arg(long, default_value_t = SynthConfig::default().label_decay)]
    pub label_decay: f64,
    /// Output path of the dataset.
    #[arg(long)]
    pub out: PathBuf,
}

impl SynthArgs {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            k0: self.k0,
            v_max: self.v_max,
            n_queries: self.queries,
            seed: self.seed,
            pointwise_sharpness: self.pointwise_sharpness,
            point_noise: self.point_noise,
            pair_sharpness: self.pair_sharpness,
            pair_noise: self.pair_noise,
            order_bias: self.order_bias,
            first_stage_quality: self.first_stage_quality,
            label_decay: self.label_decay,
        }
    }
}

/// Where queries come from and how they are split.
#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct DataArgs {
    /// JSON-Lines dataset. Without it, the default synthetic dataset is used.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Seed of the synthetic dataset used when `--data` is absent.
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    pub synth_seed: u64,
    /// Candidates per query of the synthetic dataset.
    #[arg(long, default_value_t = SynthConfig::default().k0)]
    pub synth_k0: usize,
    /// Query count of the synthetic dataset.
    #[arg(long, default_value_t = SynthConfig::default().n_queries)]
    pub synth_queries: usize,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Validation queries.
    #[arg(long, default_value_t = 50)]
    pub val: usize,
    /// Test queries.
    #[arg(long, default_value_t = 50)]
    pub test: usize,
}

impl DataArgs {
    pub fn load(&self) -> Result<Dataset> {
        match &self.data {
            Some(path) => Dataset::load_jsonl(path),
            None => synthesize_dataset(&SynthConfig {
                k0: self.synth_k0,
                n_queries: self.synth_queries,
                seed: self.synth_seed,
                ..SynthConfig::default()
            }),
        }
    }

    pub fn split(&self) -> Result<Split> {
        split_dataset(&self.load()?, self.split_seed, self.val, self.test)
    }
}

/// Training hyperparameters shared by `train` and `sweep`.
#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct TrainOpts {
    #[arg(long, value_enum, default_value_t = LossKind::Supervised)]
    pub loss: LossKind,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    pub steps: usize,
    /// Seed of the run (the first run for sweeps).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = AdamaxConfig::default().lr)]
    pub lr: f64,
    /// Rank cutoff K of the ranking loss and DCG metrics used in training.
    #[arg(long, default_value_t = TrainConfig::default().cutoff_k)]
    pub cutoff: usize,
    /// Temperature of the soft ranks.
    #[arg(long, default_value_t = SoftRankConfig::default().temperature)]
    pub temperature: f64,
    /// Standardize scores per query before soft-ranking.
    #[arg(long)]
    pub standardize: bool,
    /// Cost-term weight of selecting every prediction.
    #[arg(long, default_value_t = TrainConfig::default().cost_scale)]
    pub cost_scale: f64,
    #[arg(long, default_value_t = TrainConfig::default().eval_every)]
    pub eval_every: usize,
    #[arg(long, default_value_t = TrainConfig::default().determinize_samples)]
    pub determinize_samples: usize,
    #[arg(long, value_enum, default_value_t = DeterminizeBy::Tradeoff)]
    pub determinize_by: DeterminizeBy,
    #[arg(long, value_enum, default_value_t = StraightThrough::Probability)]
    pub straight_through: StraightThrough,
}

impl TrainOpts {
    pub fn config(&self, alpha: f64) -> TrainConfig {
        let defaults = TrainConfig::default();
        TrainConfig {
            alpha,
            loss_kind: self.loss,
            cutoff_k: self.cutoff,
            steps: self.steps,
            seed: self.seed,
            optimizer: AdamaxConfig {
                lr: self.lr,
                ..defaults.optimizer
            },
            determinize_samples: self.determinize_samples,
            determinize_by: self.determinize_by,
            eval_every: self.eval_every,
            soft_rank: SoftRankConfig {
                temperature: self.temperature,
                standardize: self.standardize,
            },
            straight_through: self.straight_through,
            cost_scale: self.cost_scale,
        }
    }
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Weight of the ranking loss; `1 - alpha` weighs the call cost.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Rerun with the arguments recorded in this manifest (only `--out` is kept).
    #[arg(long)]
    #[serde(skip)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Number of trade-off weights, spaced geometrically from 1 to 1e-5.
    #[arg(long, default_value_t = 20)]
    pub points: usize,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Rerun with the arguments recorded in this manifest (only `--out` is kept).
    #[arg(long)]
    #[serde(skip)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct BaselinesArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated top-K values; defaults to every K from 0 to k0.
    #[arg(long, value_delimiter = ',')]
    pub top_k: Vec<usize>,
    /// Output TSV; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ExportPolicyArgs {
    /// Deterministic policy JSON written by `train`.
    #[arg(long)]
    pub policy: PathBuf,
    /// Output PGM path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parsed `key = value` configuration file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CliConfig {
    pub entries: Vec<(String, String)>,
}

impl CliConfig {
    /// Blank lines and lines starting with `#` are skipped. Keys may use
    /// `_` or `-`.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: &str| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: message.to_string(),
            };
            let (key, value) = line.split_once('=').ok_or_else(|| parse_err("expected `key = value`"))?;
            let key = key.trim().replace('_', "-");
            if key.is_empty() {
                return Err(parse_err("empty key"));
            }
            entries.push((key, value.trim().to_string()));
        }
        Ok(CliConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Flags equivalent to the entries for subcommand `sub`. Unknown keys
    /// and `config` itself are rejected.
    pub fn to_args(&self, sub: &str) -> Result<Vec<OsString>> {
        let cmd = Cli::command();
        let sub_cmd = cmd
            .find_subcommand(sub)
            .ok_or_else(|| Error::invalid(format!("unknown subcommand {sub}")))?;
        let mut out = Vec::new();
        for (key, value) in &self.entries {
            let arg = sub_cmd
                .get_arguments()
                .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
                .ok_or_else(|| Error::invalid(format!("unknown config key {key:?} for {sub}")))?;
            if matches!(arg.get_action(), ArgAction::SetTrue) {
                match value.as_str() {
                    "true" => out.push(format!("--{key}").into()),
                    "false" => {}
                    _ => return Err(Error::invalid(format!("config key {key:?} expects true or false"))),
                }
            } else {
                out.push(format!("--{key}={value}").into());
            }
        }
        Ok(out)
    }
}

/// Parse `argv`, merging in the `--config` file if one is given.
pub fn parse_args(argv: &[OsString]) -> std::result::Result<Cli, ParseFailure> {
    let cli = Cli::try_parse_from(argv).map_err(ParseFailure::Clap)?;
    let Some(path) = &cli.config else {
        return Ok(cli);
    };
    let sub = cli.command.name();
    let injected = CliConfig::load(path)
        .and_then(|c| c.to_args(sub))
        .map_err(ParseFailure::Config)?;
    let pos = argv
        .iter()
        .enumerate()
        .skip(1)
        .position(|(i, a)| a == sub && argv[i - 1] != "--config")
        .map(|p| p + 2)
        .ok_or_else(|| ParseFailure::Config(Error::invalid("subcommand not found in arguments")))?;
    let mut merged: Vec<OsString> = argv[..pos].to_vec();
    merged.extend(injected);
    merged.extend(argv[pos..].iter().cloned());
    Cli::try_parse_from(&merged).map_err(ParseFailure::Clap)
}

#[derive(Debug)]
pub enum ParseFailure {
    Clap(clap::Error),
    Config(Error),
}

/// Run the tool and return its exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match parse_args(&argv) {
        Ok(cli) => cli,
        Err(ParseFailure::Clap(e)) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
        Err(ParseFailure::Config(e)) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Baselines(a) => cmd_baselines(&a),
        Command::ExportPolicy(a) => cmd_export_policy(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<i32> {
    let ds = synthesize_dataset(&args.synth_config())?;
    ds.save_jsonl(&args.out)?;
    println!(
        "wrote {}: {} queries, k0 {}, v_max {}",
        args.out.display(),
        ds.len(),
        ds.k0(),
        ds.v_max
    );
    Ok(EXIT_OK)
}

/// Recorded arguments and results of a `train` run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainManifest {
    pub command: String,
    pub version: String,
    pub args: TrainArgs,
    pub config: TrainConfig,
    pub point: TradeoffPoint,
    pub best_step: usize,
    pub wall_clock_secs: f64,
}

/// Summary written to `report.json` by `train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub alpha: f64,
    pub loss: LossKind,
    pub k0: usize,
    pub calls: usize,
    pub point_calls: usize,
    pub pair_calls: usize,
    pub expected_calls: f64,
    pub validation_loss: f64,
    pub validation_tradeoff: f64,
    pub best_step: usize,
    /// Test metrics; `distil@K` is measured against the PRP teacher ranking.
    pub test_metrics: std::collections::BTreeMap<String, f64>,
    pub first_stage_test_metrics: std::collections::BTreeMap<String, f64>,
}

fn read_manifest<T: for<'de> Deserialize<'de>>(path: &Path, command: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let recorded = value.get("command").and_then(|c| c.as_str()).unwrap_or("");
    if recorded != command {
        return Err(Error::invalid(format!(
            "{} is a {recorded:?} manifest, not {command:?}",
            path.display()
        )));
    }
    Ok(serde_json::from_value(value)?)
}

pub fn cmd_train(mut args: TrainArgs) -> Result<i32> {
    if let Some(path) = args.manifest.take() {
        let m: TrainManifest = read_manifest(&path, "train")?;
        args = TrainArgs { out: args.out, ..m.args };
    }
    let start = Instant::now();
    let split = args.data.split()?;
    let cfg = args.opts.config(args.alpha);
    let out = train_system(&split, &cfg)?;
    create_dir(&args.out)?;

    out.nets.save_json(&args.out.join("checkpoint.json"))?;
    DeterministicPolicy::new(&out.selection, cfg.seed).save_json(&args.out.join("policy.json"))?;
    let test = prepare(&split.test.queries)?;
    let first_stage = baseline_rows(&split.test.queries, &test, BaselineKind::FirstStage, &[])?;
    let p = &out.point;
    let report = TrainReport {
        alpha: cfg.alpha,
        loss: cfg.loss_kind,
        k0: split.test.k0(),
        calls: p.deterministic_calls,
        point_calls: out.selection.point_calls(),
        pair_calls: out.selection.pair_calls(),
        expected_calls: p.expected_calls,
        validation_loss: p.validation_loss,
        validation_tradeoff: p.validation_tradeoff,
        best_step: out.best_step,
        test_metrics: p.test_metrics.clone(),
        first_stage_test_metrics: first_stage[0].metrics.clone(),
    };
    write_json(&args.out.join("report.json"), &report)?;
    write_file(&args.out.join("points.tsv"), points_tsv(std::slice::from_ref(p)))?;
    let manifest = TrainManifest {
        command: "train".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        args: args.clone(),
        config: cfg,
        point: p.clone(),
        best_step: out.best_step,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;
    println!(
        "N {} (point {}, pair {}) ndcg@10 {:.4} distil@10 {:.4} -> {}",
        report.calls,
        report.point_calls,
        report.pair_calls,
        p.test_metrics["ndcg@10"],
        p.test_metrics["distil@10"],
        args.out.display()
    );
    Ok(EXIT_OK)
}

/// A sweep point that failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub alpha: f64,
    pub seed: u64,
    pub error: String,
}

/// Recorded arguments and results of a `sweep`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepManifest {
    pub command: String,
    pub version: String,
    pub args: SweepArgs,
    pub base_config: TrainConfig,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Every successful run, Pareto-optimal or not.
    pub points: Vec<TradeoffPoint>,
    pub failures: Vec<SweepFailure>,
    pub wall_clock_secs: f64,
}

pub fn cmd_sweep(mut args: SweepArgs) -> Result<i32> {
    if let Some(path) = args.manifest.take() {
        let m: SweepManifest = read_manifest(&path, "sweep")?;
        args = SweepArgs { out: args.out, ..m.args };
    }
    let start = Instant::now();
    let split = args.data.split()?;
    let base = args.opts.config(1.0);
    let alphas = alpha_grid(args.points)?;
    let runs = sweep_alphas(&split, &base, args.points, args.parallel)?;
    create_dir(&args.out)?;

    let mut points = Vec::new();
    let mut failures = Vec::new();
    for SweepRun { alpha, seed, point, failure } in &runs {
        match (point, failure) {
            (Some(p), _) => points.push(p.clone()),
            (None, f) => failures.push(SweepFailure {
                alpha: *alpha,
                seed: *seed,
                error: f.clone().unwrap_or_default(),
            }),
        }
    }
    let front = pareto_filter(&points);
    write_file(&args.out.join("curve.tsv"), points_tsv(&front))?;
    let manifest = SweepManifest {
        command: "sweep".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        args: args.clone(),
        base_config: base,
        alphas,
        seeds: runs.iter().map(|r| r.seed).collect(),
        points,
        failures,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;
    println!(
        "{} of {} runs succeeded, {} on the Pareto front -> {}",
        manifest.points.len(),
        runs.len(),
        front.len(),
        args.out.display()
    );
    if manifest.points.is_empty() {
        eprintln!("error: every sweep point failed");
        return Ok(EXIT_NUMERICAL);
    }
    Ok(EXIT_OK)
}

/// Baseline rows over `top_ks` (every K in `0..=k0` when empty), evaluated
/// on the test part of the split.
pub fn baselines_on_test(split: &Split, top_ks: &[usize]) -> Result<Vec<BaselineRow>> {
    let k0 = split.test.k0();
    let ks: Vec<usize> = if top_ks.is_empty() {
        (0..=k0).collect()
    } else {
        top_ks.to_vec()
    };
    let test = prepare(&split.test.queries)?;
    let mut rows = Vec::new();
    for kind in BaselineKind::ALL {
        rows.extend(baseline_rows(&split.test.queries, &test, kind, &ks)?);
    }
    Ok(rows)
}

pub fn cmd_baselines(args: &BaselinesArgs) -> Result<i32> {
    let split = args.data.split()?;
    let tsv = baseline_tsv(&baselines_on_test(&split, &args.top_k)?);
    match &args.out {
        Some(path) => write_file(path, tsv)?,
        None => print!("{tsv}"),
    }
    Ok(EXIT_OK)
}

pub fn cmd_export_policy(args: &ExportPolicyArgs) -> Result<i32> {
    let policy = DeterministicPolicy::load_json(&args.policy)?;
    let sample = policy.sample()?;
    write_file(&args.out, selection_pgm(&sample))?;
    println!(
        "{}x{} bitmap, {} calls -> {}",
        policy.k0,
        policy.k0 + 2,
        sample.calls(),
        args.out.display()
    );
    Ok(EXIT_OK)
}
