//! Command-line front end: `gen-data`, `train`, `eval` and `stream`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{ModelProfile, RunConfig, ScheduleProfile, SplitName};
use crate::datagen::{generate_catalog, read_dataset, split_catalog, write_dataset, Catalog};
use crate::evaluation::{
    evaluate, probability_trace, probability_traces, sweep_thresholds, write_metrics_csv, write_stream,
    write_summary_json, LevelReport, Summary,
};
use crate::heads::intensity_labels;
use crate::model::{BlockKind, HeadKind};
use crate::training::{load_checkpoint_for, EpochLog, TrainError, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sense", version, about = "Multistation earthquake early warning")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, env = "SENSE_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "SENSE_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "SENSE_OUT")]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true, env = "SENSE_FORCE")]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic catalog and write it as a dataset.
    GenData(GenArgs),
    /// Run the three-phase training schedule.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Replay one event and print alarms as they fire.
    Stream(StreamArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Dataset directory (default `<out>/dataset`).
    #[arg(long, env = "SENSE_DATASET")]
    pub dataset: Option<PathBuf>,
    #[arg(long, env = "SENSE_STATIONS")]
    pub stations: Option<usize>,
    #[arg(long, env = "SENSE_EVENTS")]
    pub events: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, env = "SENSE_HEAD")]
    pub head: Option<HeadArg>,
    #[arg(long, value_enum, env = "SENSE_BLOCK")]
    pub block: Option<BlockArg>,
    #[arg(long, value_enum, env = "SENSE_MODEL_PROFILE")]
    pub model_profile: Option<ModelProfileArg>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = "SENSE_DATASET")]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Training schedule.
    #[arg(long, value_enum, env = "SENSE_PROFILE")]
    pub profile: Option<ScheduleArg>,
    /// Epochs per phase for the test schedule, e.g. `5,2,2`.
    #[arg(long, value_delimiter = ',', env = "SENSE_EPOCHS")]
    pub epochs: Option<Vec<usize>>,
    /// Continue from a boundary checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = "SENSE_DATASET")]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Checkpoint (default `<out>/train/phase3.ckpt`).
    #[arg(long, env = "SENSE_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, env = "SENSE_SPLIT")]
    pub split: Option<SplitArg>,
    /// Fixed cutoffs per level, comma separated; skips the validation sweep.
    #[arg(long, value_delimiter = ',', env = "SENSE_TAU")]
    pub tau: Option<Vec<f64>>,
    #[arg(long, env = "SENSE_CADENCE")]
    pub cadence: Option<f64>,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long, env = "SENSE_DATASET")]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, env = "SENSE_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub event_id: u64,
    #[arg(long, env = "SENSE_CADENCE")]
    pub cadence: Option<f64>,
    #[arg(long, value_delimiter = ',', env = "SENSE_TAU")]
    pub tau: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum HeadArg {
    Discrete,
    Continuous,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BlockArg {
    Transformer,
    Conformer,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModelProfileArg {
    Test,
    Full,
    Tiny,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScheduleArg {
    JapanLike,
    TaiwanLike,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

type CliResult<T> = Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

/// Effective configuration: defaults, then the config file, then flags and
/// environment variables.
pub fn effective_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(usage)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    match &cli.command {
        Command::GenData(a) => {
            set(&mut cfg.dataset, &a.dataset);
            if let Some(n) = a.stations {
                cfg.generate.n_stations = n;
            }
            if let Some(n) = a.events {
                cfg.generate.n_events = n;
            }
        }
        Command::Train(a) => {
            set(&mut cfg.dataset, &a.dataset);
            apply_model(&mut cfg, &a.model);
            if let Some(p) = a.profile {
                cfg.train.profile = match p {
                    ScheduleArg::JapanLike => ScheduleProfile::JapanLike,
                    ScheduleArg::TaiwanLike => ScheduleProfile::TaiwanLike,
                    ScheduleArg::Test => ScheduleProfile::Test,
                };
            }
            if let Some(e) = &a.epochs {
                let e: [usize; 3] = e
                    .as_slice()
                    .try_into()
                    .map_err(|_| usage(format!("--epochs needs 3 comma-separated values, got {}", e.len())))?;
                cfg.train.epochs = Some(e);
            }
        }
        Command::Eval(a) => {
            set(&mut cfg.dataset, &a.dataset);
            apply_model(&mut cfg, &a.model);
            if let Some(s) = a.split {
                cfg.eval.split = match s {
                    SplitArg::Train => SplitName::Train,
                    SplitArg::Val => SplitName::Val,
                    SplitArg::Test => SplitName::Test,
                };
            }
            if a.tau.is_some() {
                cfg.eval.tau = a.tau.clone();
            }
            if let Some(c) = a.cadence {
                cfg.eval.cadence = c;
            }
        }
        Command::Stream(a) => {
            set(&mut cfg.dataset, &a.dataset);
            apply_model(&mut cfg, &a.model);
            if a.tau.is_some() {
                cfg.eval.tau = a.tau.clone();
            }
            if let Some(c) = a.cadence {
                cfg.eval.cadence = c;
            }
        }
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn set(slot: &mut Option<PathBuf>, value: &Option<PathBuf>) {
    if value.is_some() {
        slot.clone_from(value);
    }
}

fn apply_model(cfg: &mut RunConfig, a: &ModelArgs) {
    if let Some(h) = a.head {
        cfg.model.head = match h {
            HeadArg::Discrete => HeadKind::Discrete,
            HeadArg::Continuous => HeadKind::Continuous,
        };
    }
    if let Some(b) = a.block {
        cfg.model.block = match b {
            BlockArg::Transformer => BlockKind::Transformer,
            BlockArg::Conformer => BlockKind::Conformer,
        };
    }
    if let Some(p) = a.model_profile {
        cfg.model.profile = match p {
            ModelProfileArg::Test => ModelProfile::Test,
            ModelProfileArg::Full => ModelProfile::Full,
            ModelProfileArg::Tiny => ModelProfile::Tiny,
        };
    }
}

fn execute(cli: &Cli, stdout: &mut dyn Write) -> CliResult<()> {
    let cfg = effective_config(cli)?;
    let name = match &cli.command {
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Stream(_) => "stream",
    };
    fs::create_dir_all(&cfg.out).map_err(runtime)?;
    let echo = cfg.out.join(format!("config.{name}.toml"));
    fs::write(&echo, cfg.to_toml()).map_err(runtime)?;
    match &cli.command {
        Command::GenData(_) => cmd_gen_data(&cfg, cli.force, stdout),
        Command::Train(a) => cmd_train(&cfg, cli.force, a.resume.as_deref(), stdout),
        Command::Eval(a) => cmd_eval(&cfg, a.checkpoint.as_deref(), stdout),
        Command::Stream(a) => cmd_stream(&cfg, a.checkpoint.as_deref(), a.event_id, stdout),
    }
}

fn is_nonempty_dir(path: &Path) -> bool {
    fs::read_dir(path).is_ok_and(|mut d| d.next().is_some())
}

/// Per-level counts of station records by highest level reached; index 0
/// counts records below the first threshold.
pub fn level_histogram(catalog: &Catalog) -> Vec<usize> {
    let mut hist = vec![0; catalog.thresholds.len() + 1];
    for e in &catalog.events {
        for l in &e.labels {
            let level = intensity_labels(l.max_pga, &catalog.thresholds).y_level;
            hist[level.map_or(0, |c| c + 1)] += 1;
        }
    }
    hist
}

pub fn cmd_gen_data(cfg: &RunConfig, force: bool, stdout: &mut dyn Write) -> CliResult<()> {
    let dir = cfg.dataset_dir();
    if is_nonempty_dir(&dir) {
        if !force {
            return Err(usage(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir).map_err(runtime)?;
    }
    let catalog = generate_catalog(&cfg.gen_config()).map_err(usage)?;
    write_dataset(&catalog, &dir).map_err(runtime)?;
    let hist = level_histogram(&catalog);
    let mut lines = vec![
        format!("dataset {}", dir.display()),
        format!("events {}", catalog.events.len()),
        format!("stations {}", catalog.n_stations()),
        format!("below {} %g: {}", catalog.thresholds[0], hist[0]),
    ];
    for (c, t) in catalog.thresholds.iter().enumerate() {
        lines.push(format!("level {} (>= {t} %g): {}", c + 1, hist[c + 1]));
    }
    writeln!(stdout, "{}", lines.join("\n")).map_err(runtime)
}

fn load_splits(cfg: &RunConfig) -> CliResult<(Catalog, Catalog, Catalog, Catalog)> {
    let dir = cfg.dataset_dir();
    let catalog = read_dataset(&dir).map_err(|e| runtime(format!("cannot load dataset {}: {e}", dir.display())))?;
    let (train, val, test) = split_catalog(&catalog, cfg.split).map_err(runtime)?;
    Ok((catalog, train, val, test))
}

pub fn train_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("train")
}

fn append_log(path: &Path, log: &EpochLog, header: bool) -> std::io::Result<()> {
    let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if header {
        w.write_record(["epoch", "phase", "loss", "wall_seconds"])?;
    }
    w.write_record([
        log.epoch.to_string(),
        log.phase.to_string(),
        log.loss.to_string(),
        format!("{:.3}", log.wall_seconds),
    ])?;
    w.flush()
}

pub fn cmd_train(cfg: &RunConfig, force: bool, resume: Option<&Path>, stdout: &mut dyn Write) -> CliResult<()> {
    let (_, train, _, _) = load_splits(cfg)?;
    let model_cfg = cfg.model_config(&train).map_err(usage)?;
    let settings = cfg.train_settings().map_err(usage)?;
    let dir = train_dir(cfg);
    let log_path = dir.join("train_log.csv");
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint_for(path, &model_cfg).map_err(runtime)?;
            if ckpt.settings != settings {
                return Err(runtime("checkpoint training settings differ from the configuration"));
            }
            Trainer::from_checkpoint(ckpt).map_err(runtime)?
        }
        None => {
            if is_nonempty_dir(&dir) {
                if !force {
                    return Err(usage(format!(
                        "{} is not empty; pass --force to overwrite",
                        dir.display()
                    )));
                }
                fs::remove_dir_all(&dir).map_err(runtime)?;
            }
            let model = crate::model::SenseModel::new(model_cfg, cfg.seed).map_err(runtime)?;
            Trainer::new(model, settings)
        }
    };
    fs::create_dir_all(&dir).map_err(runtime)?;
    let mut header = !log_path.exists();
    let mut log_error = None;
    let result = trainer.run_schedule(&train, Some(&dir), &mut |log| {
        let _ = writeln!(
            stdout,
            "phase {} epoch {} loss {:.6} ({:.1} s)",
            log.phase, log.epoch, log.loss, log.wall_seconds
        );
        if let Err(e) = append_log(&log_path, log, header) {
            log_error.get_or_insert(e);
        }
        header = false;
    });
    if let Some(e) = log_error {
        return Err(runtime(format!("cannot write {}: {e}", log_path.display())));
    }
    match result {
        Ok(report) => {
            for p in &report.checkpoints {
                writeln!(stdout, "checkpoint {}", p.display()).map_err(runtime)?;
            }
            Ok(())
        }
        Err(e @ TrainError::NonFiniteLoss { .. }) => Err(runtime(format!(
            "{e}; last boundary checkpoint in {} is kept",
            dir.display()
        ))),
        Err(e) => Err(runtime(e)),
    }
}

fn load_model(cfg: &RunConfig, catalog: &Catalog, checkpoint: Option<&Path>) -> CliResult<crate::model::SenseModel> {
    let path = checkpoint.map_or_else(|| train_dir(cfg).join("phase3.ckpt"), Path::to_path_buf);
    let model_cfg = cfg.model_config(catalog).map_err(usage)?;
    let ckpt = load_checkpoint_for(&path, &model_cfg).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(ckpt.model)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, stdout: &mut dyn Write) -> CliResult<()> {
    let (catalog, train, val, test) = load_splits(cfg)?;
    let model = load_model(cfg, &catalog, checkpoint)?;
    let cadence = cfg.eval.cadence;
    let levels = catalog.thresholds.len();
    let tau = match &cfg.eval.tau {
        Some(t) if t.len() != levels => return Err(usage(format!("--tau needs {levels} values, got {}", t.len()))),
        Some(t) => t.clone(),
        None => {
            let traces = probability_traces(&model, &val, cadence).map_err(runtime)?;
            sweep_thresholds(&traces, &val, &cfg.eval.grid).map_err(runtime)?
        }
    };
    let (name, split) = match cfg.eval.split {
        SplitName::Train => ("train", &train),
        SplitName::Val => ("val", &val),
        SplitName::Test => ("test", &test),
    };
    let traces = probability_traces(&model, split, cadence).map_err(runtime)?;
    let reports = evaluate(&traces, split, &tau).map_err(runtime)?;
    let dir = cfg.out.join("eval");
    fs::create_dir_all(&dir).map_err(runtime)?;
    let csv_path = dir.join("metrics.csv");
    let file = fs::File::create(&csv_path).map_err(runtime)?;
    write_metrics_csv(file, &reports).map_err(runtime)?;
    let summary = Summary {
        split: name.to_string(),
        head: match model.config.head_kind {
            HeadKind::Discrete => "discrete".into(),
            HeadKind::Continuous => "continuous".into(),
        },
        n_events: split.events.len(),
        n_stations: split.n_stations(),
        cadence,
        levels: reports.clone(),
    };
    write_summary_json(&dir.join("summary.json"), &summary).map_err(runtime)?;
    print_reports(stdout, name, &reports).map_err(runtime)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"))
}

fn print_reports(out: &mut dyn Write, split: &str, reports: &[LevelReport]) -> std::io::Result<()> {
    writeln!(out, "split {split}")?;
    for r in reports {
        let c = r.counts;
        writeln!(
            out,
            "level {} (>= {} %g) tau {:.2}: precision {} recall {} f1 {} [tp {} fp {} tn {} fn {}] lead mean {}",
            r.level,
            r.threshold,
            r.tau,
            fmt_opt(r.metrics.precision),
            fmt_opt(r.metrics.recall),
            fmt_opt(r.metrics.f1),
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            fmt_opt(r.leading_time.map(|l| l.mean)),
        )?;
    }
    Ok(())
}

pub fn cmd_stream(cfg: &RunConfig, checkpoint: Option<&Path>, event_id: u64, stdout: &mut dyn Write) -> CliResult<()> {
    let dir = cfg.dataset_dir();
    let catalog = read_dataset(&dir).map_err(|e| runtime(format!("cannot load dataset {}: {e}", dir.display())))?;
    let event = catalog
        .event(event_id)
        .ok_or_else(|| runtime(format!("unknown event id {event_id}")))?;
    let model = load_model(cfg, &catalog, checkpoint)?;
    let levels = catalog.thresholds.len();
    let tau = match &cfg.eval.tau {
        Some(t) if t.len() != levels => return Err(usage(format!("--tau needs {levels} values, got {}", t.len()))),
        Some(t) => t.clone(),
        None => vec![0.5; levels],
    };
    let trace = probability_trace(&model, &catalog, event, cfg.eval.cadence).map_err(runtime)?;
    write_stream(stdout, &trace, &tau).map_err(runtime)
}

/// Entry point for the binary.
pub fn main_exit_code() -> i32 {
    let mut stdout = std::io::stdout().lock();
    let mut stderr = std::io::stderr().lock();
    run(std::env::args_os(), &mut stdout, &mut stderr)
}
