//! The `sag` command-line tool.
//!
//! Exit codes: 0 success, 1 gradient check failed, 2 configuration error,
//! 3 I/O error, 4 data validation or shape error, 5 numeric failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::check::{run_gradcheck, run_gradcheck_corrupted, EpisodeSize, GRADCHECK_TOLERANCE};
use crate::config::{ConfigError, RunConfig};
use crate::data::{load_dataset, synth_basin, write_dataset, write_truth_csv, BasinDataset, DataError, LoadOptions};
use crate::eval::{evaluate, parallel_map, run_experiment, summarize, write_report_csv, write_summary_csv, Scope, SummaryRow};
use crate::graph::NetworkTopology;
use crate::model::{Checkpoint, CheckpointModel, ModelError, ReleaseRoute};
use crate::pipeline::{predict_checkpoint, train_variant, RunError, Variant};
use crate::train::{chronological_split, write_history_csv, ObservationMask, TrainError};

pub const CONFIG_ECHO: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_CSV: &str = "history.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const SUMMARY_CSV: &str = "report_summary.csv";

#[derive(Debug, Parser)]
#[command(name = "sag", version, about = "State-aware graph model for stream temperature below reservoirs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic basin dataset.
    Synth(SynthArgs),
    /// Train one variant (or one run per seed with --seeds).
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and score a variant x seed matrix.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub segments: Option<usize>,
    #[arg(long)]
    pub reservoirs: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub basins: Option<usize>,
}

/// Training flags shared by `train` and `experiment`.
#[derive(Debug, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub forecaster_epochs: Option<usize>,
    #[arg(long)]
    pub bptt_window: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Reservoirs routed to SE by sag-ppx, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub se_reservoirs: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated seeds; each run goes to `<out>/seed_<k>`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "tiny")]
    pub size: String,
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

/// A failure with its process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::Read { .. } => 3,
            _ => 2,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let code = match e {
            DataError::Io { .. } => 3,
            DataError::ConfigInvalid(_) => 2,
            _ => 4,
        };
        CliError::new(code, e.to_string())
    }
}

fn model_code(e: &ModelError) -> i32 {
    match e {
        ModelError::Diff(_) => 5,
        ModelError::Config(_) => 2,
        _ => 4,
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::NonFiniteGradient(_) | TrainError::NonFiniteLoss { .. } => 5,
            TrainError::Config(_) => 2,
            TrainError::EmptyMask | TrainError::TooShort { .. } => 4,
            TrainError::Model(m) => model_code(m),
        };
        CliError::new(code, e.to_string())
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(m) => CliError::new(2, m),
            RunError::MissingReleaseData(_) | RunError::Shape(_) => CliError::new(4, e.to_string()),
            RunError::Data(d) => d.into(),
            RunError::Train(t) => t.into(),
            RunError::Model(m) => CliError::new(model_code(&m), m.to_string()),
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new(3, format!("{}: {e}", path.display()))
}

fn create_file(path: &Path) -> Result<fs::File, CliError> {
    fs::File::create(path).map_err(|e| io_error(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

/// Worker threads for seed fan-out: `SAG_THREADS` when set, otherwise the
/// available parallelism.
pub fn thread_budget() -> usize {
    std::env::var("SAG_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn apply_overrides(cfg: &mut RunConfig, o: &TrainOverrides) {
    let t = &mut cfg.train;
    if let Some(v) = o.epochs {
        t.epochs = v;
    }
    if let Some(v) = o.forecaster_epochs {
        t.forecaster_epochs = v;
    }
    if let Some(v) = o.bptt_window {
        t.bptt_window = v;
    }
    if let Some(v) = o.hidden {
        t.hidden = v;
    }
    if let Some(v) = o.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = o.train_fraction {
        t.train_fraction = v;
    }
    if let Some(v) = &o.se_reservoirs {
        cfg.run.se_reservoirs = Some(v.clone());
    }
}

fn needs_release(variant: Variant) -> bool {
    matches!(variant, Variant::SagPpx | Variant::SagFlow | Variant::SagSim)
}

fn load(dir: &Path, release: bool) -> Result<(NetworkTopology, BasinDataset), CliError> {
    Ok(load_dataset(dir, LoadOptions { release })?)
}

fn write_reports(out: &Path, reports: &[crate::eval::EvalReport]) -> Result<Vec<SummaryRow>, CliError> {
    let report_path = out.join(REPORT_CSV);
    write_report_csv(reports, create_file(&report_path)?).map_err(|e| io_error(&report_path, e))?;
    let summary = summarize(reports);
    let summary_path = out.join(SUMMARY_CSV);
    write_summary_csv(&summary, create_file(&summary_path)?).map_err(|e| io_error(&summary_path, e))?;
    Ok(summary)
}

fn print_summary(summary: &[SummaryRow]) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    write_summary_csv(summary, stdout.lock()).map_err(|e| CliError::new(3, format!("stdout: {e}")))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let s = &mut cfg.synth;
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.segments {
        s.n_segments = v;
    }
    if let Some(v) = args.reservoirs {
        s.n_reservoirs = v;
    }
    if let Some(v) = args.days {
        s.n_days = v;
    }
    if let Some(v) = args.basins {
        s.n_basins = v;
    }
    cfg.validate()?;
    let out = synth_basin(&cfg.synth)?;
    write_dataset(&args.out, &out.topology, &out.dataset)?;
    write_truth_csv(&args.out, &out.truth)?;
    write_text(&args.out.join(CONFIG_ECHO), &cfg.to_toml())?;
    log::info!(
        "wrote {} segments, {} reservoirs, {} days to {}",
        out.dataset.n_segments,
        out.dataset.n_reservoirs(),
        out.dataset.n_days,
        args.out.display()
    );
    Ok(())
}

fn train_one(cfg: &RunConfig, variant: Variant, data: &BasinDataset, topology: &NetworkTopology, out: &Path) -> Result<(), CliError> {
    let spec = cfg.spec(variant);
    let run = train_variant(data, topology, &spec)?;
    create_dir(out)?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let json = run.checkpoint.to_json().map_err(|e| CliError::new(4, e.to_string()))?;
    write_text(&ck_path, &json)?;
    let history_path = out.join(HISTORY_CSV);
    write_history_csv(&run.history, create_file(&history_path)?).map_err(|e| io_error(&history_path, e))?;
    write_text(&out.join(CONFIG_ECHO), &cfg.to_toml())?;
    log::info!("trained {variant} seed {} into {}", spec.train.seed, out.display());
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    if let Some(v) = &args.variant {
        cfg.run.variant = v.clone();
    }
    apply_overrides(&mut cfg, &args.overrides);
    if let Some(seeds) = &args.seeds {
        cfg.run.seeds = seeds.clone();
    } else if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let variant = cfg.variant()?;
    let (topology, data) = load(&args.data, needs_release(variant))?;

    let Some(seeds) = &args.seeds else {
        return train_one(&cfg, variant, &data, &topology, &args.out);
    };
    let results = parallel_map(seeds, thread_budget(), |&seed| {
        let mut c = cfg.clone();
        c.train.seed = seed;
        c.run.seeds = vec![seed];
        train_one(&c, variant, &data, &topology, &args.out.join(format!("seed_{seed}")))
    });
    results.into_iter().collect()
}

fn checkpoint_uses_se(ck: &Checkpoint) -> bool {
    match &ck.model {
        CheckpointModel::Sag { routes, .. } => routes.contains(&ReleaseRoute::Se),
        CheckpointModel::Lstm { .. } => false,
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.checkpoint).map_err(|e| io_error(&args.checkpoint, e))?;
    let ck = Checkpoint::from_json(&text).map_err(|e| CliError::new(4, e.to_string()))?;
    let (topology, data) = load(&args.data, checkpoint_uses_se(&ck))?;
    let (_, test) = chronological_split(data.n_days, ck.train_fraction)?;
    let observations = ObservationMask::from_dataset(&data).restrict_steps(test);
    if observations.count() == 0 {
        return Err(CliError::new(4, "test split holds no observations"));
    }
    let predictions = predict_checkpoint(&ck, &data, &topology)?;
    let reports = evaluate(&ck.variant, ck.seed, &predictions, &observations, &Scope::standard(&topology))
        .map_err(|e| CliError::new(4, e.to_string()))?;
    if reports.is_empty() {
        return Err(CliError::new(4, "no evaluation scope has test observations"));
    }
    create_dir(&args.out)?;
    let summary = write_reports(&args.out, &reports)?;
    print_summary(&summary)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let size: EpisodeSize = args.size.parse().map_err(|m: String| CliError::new(2, m))?;
    let report = if args.corrupt_backward {
        run_gradcheck_corrupted(size)
    } else {
        run_gradcheck(size)
    }
    .map_err(|e| CliError::new(5, e.to_string()))?;
    let worst = report.worst.as_ref().map_or("-".to_string(), |(name, j)| format!("{name}[{j}]"));
    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "max_relative_error={:.3e} entries={} worst={worst}",
        report.max_relative_error, report.entries_checked
    )
    .map_err(|e| CliError::new(3, format!("stdout: {e}")))?;
    if report.max_relative_error < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::new(
            1,
            format!("gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e}", report.max_relative_error),
        ))
    }
}

pub fn cmd_experiment(args: &ExperimentArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    if let Some(v) = &args.variants {
        cfg.run.variants = v.clone();
    }
    if let Some(s) = &args.seeds {
        cfg.run.seeds = s.clone();
    }
    apply_overrides(&mut cfg, &args.overrides);
    cfg.validate()?;
    let variants = cfg.variants()?;
    let release = variants.iter().any(|&v| needs_release(v));
    let (topology, data) = load(&args.data, release)?;
    let base = cfg.spec(Variant::SagPp);
    let reports = run_experiment(
        &data,
        &topology,
        &variants,
        &cfg.run.seeds,
        &base,
        &Scope::standard(&topology),
        thread_budget(),
    )?;
    create_dir(&args.out)?;
    write_text(&args.out.join(CONFIG_ECHO), &cfg.to_toml())?;
    let summary = write_reports(&args.out, &reports)?;
    print_summary(&summary)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}
