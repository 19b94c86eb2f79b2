//! Command-line front end: argument and config-file parsing, command
//! dispatch and CSV output.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cells::{grad_check, Arch};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::init::{InitPolicy, DEFAULT_T_CAP};
use crate::numerics::format_real;
use crate::tasks::{
    adding_baseline, adding_baseline_monte_carlo, copy_baseline, copy_baseline_monte_carlo,
    write_samples, Dataset, TaskSpec, WarpMode, WarpSpec, WARP_ALPHABET,
};
use crate::train::{multi_run, train, Budget, MetricsLog, Record, SummaryRow, TrainConfig};

pub const CSV_HEADER: &str = "iteration,train_loss,eval_loss,eval_accuracy,lr,wall_time_s";
pub const SUMMARY_HEADER: &str = "iteration,metric,mean,min,max";

/// Largest relative gradient error accepted by `gradcheck`.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "warprnn", version, about = "Train and check gated recurrent networks on synthetic long-memory tasks")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Train one network and write its metrics as CSV.
    #[command(args_override_self = true)]
    Train(Opts),
    /// Train once per seed and write per-iteration mean/min/max.
    #[command(args_override_self = true)]
    Multirun(Opts),
    /// Compare analytic gradients with central differences.
    #[command(args_override_self = true)]
    Gradcheck(Opts),
    /// Print the memoryless baseline and a Monte Carlo estimate.
    #[command(args_override_self = true)]
    Baseline(Opts),
    /// Write generated samples, one per line.
    #[command(args_override_self = true)]
    ExportData(Opts),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskKind {
    Warp,
    Pad,
    Copy,
    Varcopy,
    Adding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum WarpKind {
    Uniform,
    Variable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InitKind {
    Default,
    Standard,
    Chrono,
    GateRange,
    HeavyTail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ArchKind {
    Rnn,
    Leaky,
    Gated,
    Lstm,
}

impl From<ArchKind> for Arch {
    fn from(a: ArchKind) -> Self {
        match a {
            ArchKind::Rnn => Arch::Rnn,
            ArchKind::Leaky => Arch::Leaky,
            ArchKind::Gated => Arch::Gated,
            ArchKind::Lstm => Arch::Lstm,
        }
    }
}

/// Flags shared by every subcommand. Unset values fall back to task-dependent
/// defaults.
#[derive(Args, Clone, Debug, Default)]
pub struct Opts {
    #[arg(long, value_enum)]
    pub task: Option<TaskKind>,
    #[arg(long, value_enum)]
    pub warp_mode: Option<WarpKind>,
    #[arg(long, value_name = "N")]
    pub max_warp: Option<usize>,
    /// Lower end of the variable warp range.
    #[arg(long, value_name = "N")]
    pub min_warp: Option<usize>,
    /// Sequence length (warping), delay (copy) or length (adding).
    #[arg(long = "T", value_name = "N")]
    pub t: Option<usize>,
    #[arg(long, value_enum)]
    pub arch: Option<ArchKind>,
    #[arg(long, value_enum)]
    pub init: Option<InitKind>,
    /// Upper time range for chrono and gate-range, cap for heavy-tail.
    #[arg(long, value_name = "R")]
    pub t_max: Option<f64>,
    #[arg(long, value_name = "R")]
    pub t_min: Option<f64>,
    #[arg(long, value_name = "R")]
    pub forget_bias: Option<f64>,
    /// Draw chrono time ranges from the integers.
    #[arg(long)]
    pub integer_chrono: bool,
    #[arg(long, value_name = "N")]
    pub hidden: Option<usize>,
    #[arg(long, value_name = "N")]
    pub batch: Option<usize>,
    #[arg(long, value_name = "R")]
    pub lr: Option<f64>,
    #[arg(long, value_name = "R")]
    pub rho: Option<f64>,
    #[arg(long, value_name = "R")]
    pub eps: Option<f64>,
    /// Batches without improvement before halving the learning rate.
    #[arg(long, value_name = "N")]
    pub patience: Option<usize>,
    /// Learning-rate schedule on or off (default: on for warping tasks).
    #[arg(long, value_name = "BOOL")]
    pub schedule: Option<bool>,
    /// Fixed training-set size; 0 draws fresh samples for every batch.
    #[arg(long, value_name = "N")]
    pub train_samples: Option<usize>,
    #[arg(long, value_name = "N")]
    pub eval_samples: Option<usize>,
    #[arg(long, value_name = "N", conflicts_with = "iters")]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    pub iters: Option<usize>,
    #[arg(long, value_name = "N")]
    pub eval_every: Option<usize>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "N")]
    pub runs: Option<usize>,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// File of `key = value` lines using the flag names.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub export: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub test_max_warp: Option<usize>,
    #[arg(long, value_name = "N")]
    pub test_min_warp: Option<usize>,
    /// Sequences per work item inside a batch.
    #[arg(long, value_name = "N")]
    pub chunk: Option<usize>,
    /// Disable the thread pool.
    #[arg(long)]
    pub sequential: bool,
}

/// A parsed, validated command.
#[derive(Clone, Debug)]
pub enum Command {
    Train { cfg: TrainConfig, out: Option<PathBuf> },
    Multirun { cfg: TrainConfig, seeds: Vec<u64>, out: Option<PathBuf> },
    Gradcheck { archs: Vec<Arch>, hidden: usize, seq_len: usize, seeds: Vec<u64> },
    Baseline { task: TaskSpec, samples: usize, seed: u64, exec: Exec },
    ExportData { task: TaskSpec, samples: usize, seed: u64, out: Option<PathBuf> },
}

/// Why parsing stopped.
#[derive(Debug)]
pub enum ParseError {
    /// Help or version text; print it and exit successfully.
    Info(String),
    /// Bad flags or an invalid combination.
    Usage(String),
}

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseError::Info(s) | ParseError::Usage(s) => f.write_str(s),
        }
    }
}

fn clap_error(e: clap::Error) -> ParseError {
    use clap::error::ErrorKind;
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ParseError::Info(e.to_string()),
        _ => ParseError::Usage(e.to_string()),
    }
}

fn usage(e: impl std::fmt::Display) -> ParseError {
    ParseError::Usage(format!("error: {e}"))
}

/// Turns config-file text into flag arguments. Keys are flag names without
/// the leading dashes; `#` starts a comment.
pub fn config_args(text: &str) -> std::result::Result<Vec<String>, String> {
    let mut args = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected `key = value`", n + 1))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || key.starts_with('-') {
            return Err(format!("config line {}: bad key `{key}`", n + 1));
        }
        if key == "config" {
            return Err(format!("config line {}: nested config files are not supported", n + 1));
        }
        match (key, value) {
            ("integer-chrono" | "sequential", "true") => args.push(format!("--{key}")),
            ("integer-chrono" | "sequential", "false") => {}
            _ => {
                args.push(format!("--{key}"));
                args.push(value.to_string());
            }
        }
    }
    Ok(args)
}

fn parse_cli(argv: &[String]) -> std::result::Result<Cli, ParseError> {
    Cli::try_parse_from(argv).map_err(clap_error)
}

/// Parses `argv` (program name first). Config-file values are inserted
/// before the command-line flags so that flags take precedence.
pub fn parse_args<I, S>(argv: I) -> std::result::Result<Command, ParseError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let first = parse_cli(&argv)?;
    let cli = match opts_of(&first.command).config.clone() {
        None => first,
        Some(path) => {
            let text = fs::read_to_string(&path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            let extra = config_args(&text).map_err(usage)?;
            let mut merged = argv[..2.min(argv.len())].to_vec();
            merged.extend(extra);
            merged.extend(argv.iter().skip(2).cloned());
            parse_cli(&merged)?
        }
    };
    resolve(cli.command)
}

fn opts_of(sub: &Sub) -> &Opts {
    match sub {
        Sub::Train(o) | Sub::Multirun(o) | Sub::Gradcheck(o) | Sub::Baseline(o) | Sub::ExportData(o) => o,
    }
}

/// Task described by the flags, with task-dependent defaults.
pub fn task_from(o: &Opts) -> std::result::Result<TaskSpec, ParseError> {
    let kind = o.task.unwrap_or(TaskKind::Warp);
    let t = o.t.unwrap_or(match kind {
        TaskKind::Warp | TaskKind::Pad | TaskKind::Copy | TaskKind::Varcopy => 500,
        TaskKind::Adding => 200,
    });
    if t == 0 {
        return Err(usage("--T must be at least 1"));
    }
    let task = match kind {
        TaskKind::Warp | TaskKind::Pad => {
            let variable = o.warp_mode == Some(WarpKind::Variable);
            let mode = match (kind, variable) {
                (TaskKind::Warp, false) => WarpMode::Uniform,
                (TaskKind::Warp, true) => WarpMode::Variable,
                (_, false) => WarpMode::UniformPad,
                (_, true) => WarpMode::VariablePad,
            };
            let mut spec = WarpSpec::new(mode, o.max_warp.unwrap_or(1), t);
            spec.min_warp = o.min_warp.unwrap_or(1);
            TaskSpec::Warp {
                spec,
                alphabet: WARP_ALPHABET,
            }
        }
        TaskKind::Copy => TaskSpec::Copy { t },
        TaskKind::Varcopy => TaskSpec::VariableCopy { t },
        TaskKind::Adding => TaskSpec::Adding { t },
    };
    task.validate().map_err(usage)?;
    Ok(task)
}

fn test_task_from(o: &Opts, task: TaskSpec) -> std::result::Result<Option<TaskSpec>, ParseError> {
    if o.test_max_warp.is_none() && o.test_min_warp.is_none() {
        return Ok(None);
    }
    let TaskSpec::Warp { mut spec, alphabet } = task else {
        return Err(usage("--test-max-warp and --test-min-warp apply to warping tasks"));
    };
    spec.max_warp = o.test_max_warp.unwrap_or(spec.max_warp);
    spec.min_warp = o.test_min_warp.unwrap_or(spec.min_warp);
    let test = TaskSpec::Warp { spec, alphabet };
    test.validate().map_err(usage)?;
    Ok(Some(test))
}

/// Default upper time range: 3T/2 for copy, T for variable copy and adding,
/// the maximum warp for warping tasks.
pub fn default_t_max(task: &TaskSpec) -> f64 {
    match *task {
        TaskSpec::Copy { t } => 1.5 * t as f64,
        TaskSpec::VariableCopy { t } | TaskSpec::Adding { t } => t as f64,
        TaskSpec::Warp { spec, .. } => spec.max_warp as f64,
    }
}

fn init_from(o: &Opts, task: &TaskSpec) -> std::result::Result<InitPolicy, ParseError> {
    Ok(match o.init.unwrap_or(InitKind::Default) {
        InitKind::Default => InitPolicy::Default,
        InitKind::Standard => InitPolicy::Standard {
            forget_bias: o.forget_bias.unwrap_or(1.0),
        },
        InitKind::Chrono => InitPolicy::Chrono {
            t_max: o.t_max.unwrap_or_else(|| default_t_max(task)),
            integer: o.integer_chrono,
        },
        InitKind::GateRange => {
            let t_min = o.t_min.unwrap_or(2.0);
            InitPolicy::GateRange {
                t_min,
                t_max: o.t_max.unwrap_or_else(|| default_t_max(task).max(t_min)),
            }
        }
        InitKind::HeavyTail => {
            let cap = match o.t_max {
                None => DEFAULT_T_CAP,
                Some(r) if r.is_finite() && r >= 2.0 => r as usize,
                Some(r) => return Err(usage(format!("heavy-tail cap must be >= 2, got {r}"))),
            };
            InitPolicy::HeavyTail { t_cap: cap }
        }
    })
}

fn exec_from(o: &Opts) -> Exec {
    if o.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

/// Training configuration described by the flags.
pub fn train_config(o: &Opts) -> std::result::Result<TrainConfig, ParseError> {
    let task = task_from(o)?;
    let d = TrainConfig::for_task(task);
    let train_samples = match o.train_samples {
        Some(0) => None,
        Some(n) => Some(n),
        None => d.train_samples,
    };
    let budget = match (o.epochs, o.iters) {
        (Some(e), _) => Budget::Epochs(e),
        (_, Some(i)) => Budget::Iterations(i),
        _ if train_samples.is_none() => Budget::Iterations(8_000),
        _ => d.budget,
    };
    let cfg = TrainConfig {
        test_task: test_task_from(o, task)?,
        arch: o.arch.map(Arch::from).unwrap_or(d.arch),
        hidden: o.hidden.unwrap_or(d.hidden),
        init: init_from(o, &task)?,
        batch: o.batch.unwrap_or(d.batch),
        lr: o.lr.unwrap_or(d.lr),
        rho: o.rho.unwrap_or(d.rho),
        eps: o.eps.unwrap_or(d.eps),
        patience: o.patience.unwrap_or(d.patience),
        schedule: o.schedule.unwrap_or(d.schedule),
        train_samples,
        eval_samples: o.eval_samples.unwrap_or(d.eval_samples),
        budget,
        eval_every: o.eval_every.unwrap_or(d.eval_every),
        seed: o.seed.unwrap_or(d.seed),
        chunk: o.chunk.unwrap_or(d.chunk),
        exec: exec_from(o),
        ..d
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn seeds(o: &Opts, default_runs: usize) -> std::result::Result<Vec<u64>, ParseError> {
    let runs = o.runs.unwrap_or(default_runs);
    if runs == 0 {
        return Err(usage("--runs must be at least 1"));
    }
    let base = o.seed.unwrap_or(0);
    Ok((0..runs as u64).map(|k| base.wrapping_add(k)).collect())
}

fn resolve(sub: Sub) -> std::result::Result<Command, ParseError> {
    Ok(match sub {
        Sub::Train(o) => Command::Train {
            cfg: train_config(&o)?,
            out: o.out,
        },
        Sub::Multirun(o) => Command::Multirun {
            cfg: train_config(&o)?,
            seeds: seeds(&o, 5)?,
            out: o.out,
        },
        Sub::Gradcheck(o) => {
            let hidden = o.hidden.unwrap_or(8);
            let seq_len = o.t.unwrap_or(12);
            if hidden == 0 || seq_len == 0 {
                return Err(usage("--hidden and --T must be at least 1"));
            }
            Command::Gradcheck {
                archs: match o.arch {
                    Some(a) => vec![a.into()],
                    None => Arch::ALL.to_vec(),
                },
                hidden,
                seq_len,
                seeds: seeds(&o, 20)?,
            }
        }
        Sub::Baseline(o) => {
            let task = task_from(&o)?;
            if task.baseline().is_none() {
                return Err(usage("baselines exist for --task copy and --task adding"));
            }
            let samples = o.eval_samples.unwrap_or(100_000);
            if samples == 0 {
                return Err(usage("--eval-samples must be at least 1"));
            }
            Command::Baseline {
                task,
                samples,
                seed: o.seed.unwrap_or(0),
                exec: exec_from(&o),
            }
        }
        Sub::ExportData(o) => {
            let samples = o.train_samples.unwrap_or(10);
            if samples == 0 {
                return Err(usage("--train-samples must be at least 1"));
            }
            Command::ExportData {
                task: task_from(&o)?,
                samples,
                seed: o.seed.unwrap_or(0),
                out: o.export.or(o.out),
            }
        }
    })
}

/// Writes the metrics CSV: header, then one row per record with reals at 17
/// significant digits.
pub fn emit_csv<W: Write + ?Sized>(log: &MetricsLog, out: &mut W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in &log.records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iteration,
            format_real(r.train_loss),
            format_real(r.eval_loss),
            format_real(r.eval_accuracy),
            format_real(r.lr),
            format_real(r.wall_time_s)
        )?;
    }
    Ok(())
}

pub fn write_csv(log: &MetricsLog, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    emit_csv(log, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Parses text written by [`emit_csv`].
pub fn parse_csv(text: &str) -> Result<MetricsLog> {
    let bad = |n: usize, what: &str| Error::Config(format!("csv line {n}: {what}"));
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    let mut log = MetricsLog::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(n, "expected 6 fields"));
        }
        let real = |s: &str| s.parse::<f64>().map_err(|_| bad(n, "bad number"));
        log.push(Record {
            iteration: f[0].parse().map_err(|_| bad(n, "bad iteration"))?,
            train_loss: real(f[1])?,
            eval_loss: real(f[2])?,
            eval_accuracy: real(f[3])?,
            lr: real(f[4])?,
            wall_time_s: real(f[5])?,
        })?;
    }
    Ok(log)
}

pub fn emit_summary<W: Write + ?Sized>(rows: &[SummaryRow], out: &mut W) -> io::Result<()> {
    writeln!(out, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration,
            r.metric,
            format_real(r.mean),
            format_real(r.min),
            format_real(r.max)
        )?;
    }
    Ok(())
}

/// `runs.csv` next to `out` becomes `runs.seed7.csv`.
fn seed_path(out: &Path, seed: u64) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    out.with_file_name(format!("{stem}.seed{seed}.csv"))
}

fn with_output<F>(path: Option<&Path>, f: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            f(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            f(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

/// Executes a parsed command, printing results to stdout.
pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { cfg, out } => match train(&cfg) {
            Ok(run) => {
                with_output(out.as_deref(), |w| emit_csv(&run.log, w))?;
                if let Some(last) = run.log.last() {
                    eprintln!(
                        "iteration {}: eval loss {:.6}, accuracy {:.4}",
                        last.iteration, last.eval_loss, last.eval_accuracy
                    );
                }
                Ok(())
            }
            Err(aborted) => {
                with_output(out.as_deref(), |w| emit_csv(&aborted.log, w))?;
                Err(aborted.error)
            }
        },
        Command::Multirun { cfg, seeds, out } => {
            let result = multi_run(&cfg, &seeds, cfg.exec)?;
            if let Some(path) = out.as_deref() {
                for (seed, log) in &result.runs {
                    write_csv(log, &seed_path(path, *seed))?;
                }
                for (seed, aborted) in &result.failed {
                    write_csv(&aborted.log, &seed_path(path, *seed))?;
                }
            }
            with_output(out.as_deref(), |w| emit_summary(&result.summary, w))?;
            for (seed, aborted) in &result.failed {
                eprintln!("seed {seed} failed: {aborted}");
            }
            if result.runs.is_empty() {
                return Err(Error::Numerical {
                    iteration: 0,
                    detail: "every run failed".into(),
                });
            }
            Ok(())
        }
        Command::Gradcheck {
            archs,
            hidden,
            seq_len,
            seeds,
        } => {
            let mut failures = 0;
            for arch in archs {
                let mut worst = 0.0f64;
                for &seed in &seeds {
                    worst = worst.max(grad_check(arch, hidden, seq_len, seed)?);
                }
                let ok = worst < GRAD_TOLERANCE;
                failures += usize::from(!ok);
                println!(
                    "{arch}: max relative error {worst:.3e} over {} seeds: {}",
                    seeds.len(),
                    if ok { "ok" } else { "FAIL" }
                );
            }
            if failures > 0 {
                return Err(Error::Numerical {
                    iteration: 0,
                    detail: format!("{failures} architecture(s) exceeded {GRAD_TOLERANCE:e}"),
                });
            }
            Ok(())
        }
        Command::Baseline {
            task,
            samples,
            seed,
            exec,
        } => {
            let (closed, mc) = match task {
                TaskSpec::Copy { t } => (copy_baseline(t), copy_baseline_monte_carlo(t, samples, seed, exec)?),
                TaskSpec::Adding { t } => (adding_baseline(), adding_baseline_monte_carlo(t, samples, seed, exec)?),
                _ => unreachable!("checked while parsing"),
            };
            println!("closed form: {closed:.6}");
            println!("monte carlo: {mc:.6} ({samples} samples)");
            Ok(())
        }
        Command::ExportData {
            task,
            samples,
            seed,
            out,
        } => {
            let data = Dataset::new(task, seed, samples)?.materialize(Exec::default())?;
            with_output(out.as_deref(), |w| write_samples(w, &data))
        }
    }
}

/// Parses and runs; returns the process exit code.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    match parse_args(argv) {
        Ok(cmd) => match run(cmd) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
        Err(ParseError::Info(text)) => {
            print!("{text}");
            0
        }
        Err(ParseError::Usage(text)) => {
            eprint!("{text}");
            if !text.ends_with('\n') {
                eprintln!();
            }
            1
        }
    }
}
