//! Training loop, periodic evaluation, metric logs and multi-seed runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Instant;

use crate::cells::{Arch, Network, OutputKind};
use crate::error::{config, Error, Result};
use crate::exec::Exec;
use crate::init::InitPolicy;
use crate::numerics::Rng;
use crate::optim::{LrSchedule, RmsProp, DEFAULT_EPS, DEFAULT_LR, DEFAULT_RHO};
use crate::tasks::{Dataset, TaskSample, TaskSpec};

/// Random streams split off the run seed.
const STREAM_WEIGHTS: u64 = 0;
const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;
const STREAM_VALID: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Budget {
    /// Full passes over a fixed training set.
    Epochs(usize),
    /// Optimizer steps.
    Iterations(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: TaskSpec,
    /// Task used for the evaluation set; defaults to `task`.
    pub test_task: Option<TaskSpec>,
    pub arch: Arch,
    pub hidden: usize,
    pub init: InitPolicy,
    pub batch: usize,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    /// Batches without improvement before the learning rate is halved.
    pub patience: usize,
    /// Whether the plateau schedule is active.
    pub schedule: bool,
    /// Size of the fixed training set; `None` draws fresh samples for every
    /// batch.
    pub train_samples: Option<usize>,
    pub eval_samples: usize,
    pub budget: Budget,
    /// Batches between evaluations.
    pub eval_every: usize,
    pub seed: u64,
    /// Sequences per work item when splitting a batch.
    pub chunk: usize,
    pub exec: Exec,
}

impl TrainConfig {
    /// Defaults for `task`: warping tasks use 64 units, batches of 32, a
    /// fixed 50,000-sequence training set for 3 epochs, 10,000 evaluation
    /// sequences and the plateau schedule. Copy and adding tasks use 128
    /// units, batches of 50, fresh samples, 1,000 evaluation sequences and a
    /// constant learning rate.
    pub fn for_task(task: TaskSpec) -> Self {
        let warp = matches!(task, TaskSpec::Warp { .. });
        Self {
            task,
            test_task: None,
            arch: if warp { Arch::Gated } else { Arch::Lstm },
            hidden: if warp { 64 } else { 128 },
            init: InitPolicy::Default,
            batch: if warp { 32 } else { 50 },
            lr: DEFAULT_LR,
            rho: DEFAULT_RHO,
            eps: DEFAULT_EPS,
            patience: 100,
            schedule: warp,
            train_samples: warp.then_some(50_000),
            eval_samples: if warp { 10_000 } else { 1_000 },
            budget: if warp {
                Budget::Epochs(3)
            } else {
                Budget::Iterations(8_000)
            },
            eval_every: 100,
            seed: 0,
            chunk: 16,
            exec: Exec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        let eval_task = self.eval_task();
        eval_task.validate()?;
        if eval_task.n_inputs() != self.task.n_inputs()
            || eval_task.is_regression() != self.task.is_regression()
        {
            return config("test task must share the training task's inputs and outputs");
        }
        let counts = [
            ("hidden", self.hidden),
            ("batch", self.batch),
            ("patience", self.patience),
            ("eval-samples", self.eval_samples),
            ("eval-every", self.eval_every),
            ("chunk", self.chunk),
        ];
        for (name, v) in counts {
            if v == 0 {
                return config(format!("{name} must be at least 1"));
            }
        }
        if self.train_samples == Some(0) {
            return config("train-samples must be at least 1");
        }
        if let Budget::Epochs(_) = self.budget {
            if self.train_samples.is_none() {
                return config("an epoch budget needs a fixed training set");
            }
        }
        RmsProp::new(self.lr, self.rho, self.eps)?;
        self.init.validate_for(self.arch)
    }

    pub fn eval_task(&self) -> TaskSpec {
        self.test_task.unwrap_or(self.task)
    }

    /// Optimizer steps the budget allows.
    pub fn iterations(&self) -> usize {
        match (self.budget, self.train_samples) {
            (Budget::Iterations(n), _) => n,
            (Budget::Epochs(e), Some(n)) => e * n.div_ceil(self.batch),
            (Budget::Epochs(_), None) => 0,
        }
    }

    /// Patience expressed in evaluation points.
    pub fn patience_evals(&self) -> usize {
        self.patience.div_ceil(self.eval_every).max(1)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// One evaluation point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Record {
    pub iteration: usize,
    /// Mean loss of the batches since the previous record; at iteration 0,
    /// the loss of the first batch before any update.
    pub train_loss: f64,
    pub eval_loss: f64,
    /// Fraction of correct masked steps, -1 for regression.
    pub eval_accuracy: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

impl Record {
    /// Fields that must match between two runs of the same configuration.
    pub fn same_values(&self, other: &Record) -> bool {
        self.iteration == other.iteration
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.eval_loss.to_bits() == other.eval_loss.to_bits()
            && self.eval_accuracy.to_bits() == other.eval_accuracy.to_bits()
            && self.lr.to_bits() == other.lr.to_bits()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<Record>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.iteration <= last.iteration {
                return config("metric iterations must increase");
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn last(&self) -> Option<&Record> {
        self.records.last()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Equality ignoring wall time.
    pub fn same_values(&self, other: &MetricsLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.same_values(b))
    }

    /// First iteration whose evaluation loss is below `threshold`.
    pub fn first_below(&self, threshold: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.eval_loss < threshold)
            .map(|r| r.iteration)
    }

    pub fn best_eval_loss(&self) -> Option<f64> {
        self.records.iter().map(|r| r.eval_loss).reduce(f64::min)
    }
}

/// A training run stopped by an error; `log` holds every record written
/// before the failure.
#[derive(Debug)]
pub struct Aborted {
    pub log: MetricsLog,
    pub error: Error,
}

impl fmt::Display for Aborted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} records)", self.error, self.log.len())
    }
}

impl std::error::Error for Aborted {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for Aborted {
    fn from(error: Error) -> Self {
        Self {
            log: MetricsLog::new(),
            error,
        }
    }
}

/// Trained network together with its metrics.
#[derive(Clone, Debug)]
pub struct Run {
    pub network: Network,
    pub log: MetricsLog,
}

/// Untrained network for `cfg`: random weights, then gate biases from the
/// init policy.
pub fn build_network(cfg: &TrainConfig) -> Result<Network> {
    let output = if cfg.task.is_regression() {
        OutputKind::Regression
    } else {
        OutputKind::Classes
    };
    let mut net = Network::random(
        cfg.arch,
        cfg.task.n_inputs(),
        cfg.hidden,
        cfg.task.n_outputs(),
        output,
        &mut Rng::derive(cfg.seed, STREAM_WEIGHTS),
    )?;
    cfg.init
        .apply(&mut net.cell, &mut Rng::derive(cfg.seed, STREAM_INIT))?;
    Ok(net)
}

/// Held-out evaluation set of `cfg`, generated once from the run seed.
pub fn eval_set(cfg: &TrainConfig) -> Result<Vec<TaskSample>> {
    Dataset::new(
        cfg.eval_task(),
        Rng::derive(cfg.seed, STREAM_EVAL).next_u64(),
        cfg.eval_samples,
    )?
    .materialize(cfg.exec)
}

/// Held-out set from the training distribution that drives the schedule
/// when the evaluation set comes from a different task; `None` when the
/// evaluation set already serves.
pub fn schedule_set(cfg: &TrainConfig) -> Result<Option<Vec<TaskSample>>> {
    if !cfg.schedule || cfg.eval_task() == cfg.task {
        return Ok(None);
    }
    Dataset::new(
        cfg.task,
        Rng::derive(cfg.seed, STREAM_VALID).next_u64(),
        cfg.eval_samples,
    )?
    .materialize(cfg.exec)
    .map(Some)
}

/// Produces training batches: shuffled epochs over a fixed set, or fresh
/// samples for every batch.
enum Batches {
    Fixed {
        samples: Vec<TaskSample>,
        order: Vec<usize>,
        pos: usize,
        batch: usize,
        rng: Rng,
    },
    Fresh {
        data: Dataset,
        next: usize,
        batch: usize,
    },
}

impl Batches {
    fn new(cfg: &TrainConfig) -> Result<Self> {
        let seed = Rng::derive(cfg.seed, STREAM_TRAIN).next_u64();
        Ok(match cfg.train_samples {
            Some(n) => {
                let samples = Dataset::new(cfg.task, seed, n)?.materialize(cfg.exec)?;
                let mut rng = Rng::derive(cfg.seed, STREAM_SHUFFLE);
                let mut order: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut order);
                Batches::Fixed {
                    samples,
                    order,
                    pos: 0,
                    batch: cfg.batch,
                    rng,
                }
            }
            None => Batches::Fresh {
                data: Dataset::new(cfg.task, seed, usize::MAX)?,
                next: 0,
                batch: cfg.batch,
            },
        })
    }

    fn next_batch(&mut self) -> Result<Vec<TaskSample>> {
        match self {
            Batches::Fixed {
                samples,
                order,
                pos,
                batch,
                rng,
            } => {
                if *pos >= order.len() {
                    rng.shuffle(order);
                    *pos = 0;
                }
                let end = (*pos + *batch).min(order.len());
                let out = order[*pos..end].iter().map(|&i| samples[i].clone()).collect();
                *pos = end;
                Ok(out)
            }
            Batches::Fresh { data, next, batch } => {
                let out = (*next..*next + *batch)
                    .map(|i| data.sample(i))
                    .collect::<Result<_>>()?;
                *next += *batch;
                Ok(out)
            }
        }
    }
}

/// Mean loss and accuracy of `net` on the first `n` samples of `samples`.
pub fn evaluate(
    net: &Network,
    samples: &[TaskSample],
    n: usize,
    chunk: usize,
    exec: Exec,
) -> Result<(f64, f64)> {
    if n == 0 || n > samples.len() {
        return config(format!("cannot evaluate {n} of {} samples", samples.len()));
    }
    let stats = net.evaluate(&samples[..n], chunk, exec)?;
    Ok((stats.loss, stats.accuracy()))
}

fn numerical(iteration: usize, what: &str, value: f64) -> Error {
    Error::Numerical {
        iteration,
        detail: format!("{what} is {value}"),
    }
}

/// Trains a network according to `cfg`.
///
/// An evaluation record is written at iteration 0, every `eval_every`
/// iterations, and after the last iteration.
pub fn train(cfg: &TrainConfig) -> std::result::Result<Run, Aborted> {
    cfg.validate()?;
    let mut net = build_network(cfg)?;
    let evals = eval_set(cfg)?;
    let valid = schedule_set(cfg)?;
    let mut batches = Batches::new(cfg)?;
    let mut opt = RmsProp::new(cfg.lr, cfg.rho, cfg.eps)?;
    let mut schedule = LrSchedule::new(cfg.patience_evals())?;
    let total = cfg.iterations();
    let start = Instant::now();
    let mut log = MetricsLog::new();

    let mut pending = Some(batches.next_batch()?);
    let first_loss = {
        let batch = pending.as_ref().expect("first batch");
        net.evaluate(batch, cfg.chunk, cfg.exec)?.loss
    };

    let mut record = |net: &Network,
                      iteration: usize,
                      train_loss: f64,
                      opt: &mut RmsProp,
                      log: &mut MetricsLog|
     -> Result<()> {
        let stats = net.evaluate(&evals, cfg.chunk, cfg.exec)?;
        if !train_loss.is_finite() {
            return Err(numerical(iteration, "training loss", train_loss));
        }
        if !stats.loss.is_finite() {
            return Err(numerical(iteration, "evaluation loss", stats.loss));
        }
        log.push(Record {
            iteration,
            train_loss,
            eval_loss: stats.loss,
            eval_accuracy: stats.accuracy(),
            lr: opt.lr(),
            wall_time_s: start.elapsed().as_secs_f64(),
        })?;
        if cfg.schedule && iteration > 0 {
            let signal = match &valid {
                Some(v) => net.evaluate(v, cfg.chunk, cfg.exec)?.loss,
                None => stats.loss,
            };
            schedule.update(signal, opt);
        }
        Ok(())
    };

    let abort = |log: &MetricsLog, error: Error| Aborted {
        log: log.clone(),
        error,
    };

    if let Err(e) = record(&net, 0, first_loss, &mut opt, &mut log) {
        return Err(abort(&log, e));
    }
    let mut window = (0.0, 0usize);

    for iteration in 1..=total {
        let step = (|| -> Result<f64> {
            let batch = match pending.take() {
                Some(b) => b,
                None => batches.next_batch()?,
            };
            let (loss, grad) = net.loss_and_grad(&batch, cfg.chunk, cfg.exec)?;
            if !loss.is_finite() {
                return Err(numerical(iteration, "training loss", loss));
            }
            opt.step(&mut net, &grad, iteration)?;
            Ok(loss)
        })();
        let loss = match step {
            Ok(l) => l,
            Err(e) => return Err(abort(&log, e)),
        };
        window.0 += loss;
        window.1 += 1;
        if iteration % cfg.eval_every == 0 || iteration == total {
            let mean = window.0 / window.1 as f64;
            if let Err(e) = record(&net, iteration, mean, &mut opt, &mut log) {
                return Err(abort(&log, e));
            }
            window = (0.0, 0);
        }
    }
    Ok(Run { network: net, log })
}

/// Runs `cfg` and returns only the metrics.
pub fn run_experiment(cfg: &TrainConfig) -> std::result::Result<MetricsLog, Aborted> {
    train(cfg).map(|run| run.log)
}

/// Metric columns aggregated by [`multi_run`].
pub const SUMMARY_METRICS: [&str; 4] = ["train_loss", "eval_loss", "eval_accuracy", "lr"];

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub iteration: usize,
    pub metric: &'static str,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug)]
pub struct MultiRun {
    /// Successful runs, in seed order.
    pub runs: Vec<(u64, MetricsLog)>,
    /// Seeds whose run aborted, with the failure.
    pub failed: Vec<(u64, Aborted)>,
    /// Per-iteration aggregates over successful runs, for iterations every
    /// successful run recorded.
    pub summary: Vec<SummaryRow>,
}

fn metric(r: &Record, name: &str) -> f64 {
    match name {
        "train_loss" => r.train_loss,
        "eval_loss" => r.eval_loss,
        "eval_accuracy" => r.eval_accuracy,
        _ => r.lr,
    }
}

/// Mean, min and max of each metric across logs, aligned by iteration.
pub fn summarize(logs: &[&MetricsLog]) -> Vec<SummaryRow> {
    let mut by_iter: BTreeMap<usize, Vec<&Record>> = BTreeMap::new();
    for log in logs {
        for r in &log.records {
            by_iter.entry(r.iteration).or_default().push(r);
        }
    }
    let mut rows = Vec::new();
    for (iteration, recs) in by_iter {
        if recs.len() != logs.len() {
            continue;
        }
        for name in SUMMARY_METRICS {
            let vals: Vec<f64> = recs.iter().map(|r| metric(r, name)).collect();
            rows.push(SummaryRow {
                iteration,
                metric: name,
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    rows
}

/// Trains `cfg` once per seed, runs distributed by `exec`, and aggregates
/// the successful logs.
pub fn multi_run(cfg: &TrainConfig, seeds: &[u64], exec: Exec) -> Result<MultiRun> {
    if seeds.is_empty() {
        return config("multi-run needs at least one seed");
    }
    let distinct: BTreeSet<u64> = seeds.iter().copied().collect();
    if distinct.len() != seeds.len() {
        return config("multi-run seeds must be distinct");
    }
    cfg.validate()?;
    let results = exec.map(seeds, |&seed| run_experiment(&cfg.with_seed(seed)));
    let mut runs = Vec::new();
    let mut failed = Vec::new();
    for (&seed, r) in seeds.iter().zip(results) {
        match r {
            Ok(log) => runs.push((seed, log)),
            Err(a) => failed.push((seed, a)),
        }
    }
    let logs: Vec<&MetricsLog> = runs.iter().map(|(_, l)| l).collect();
    let summary = if logs.is_empty() { Vec::new() } else { summarize(&logs) };
    Ok(MultiRun {
        runs,
        failed,
        summary,
    })
}
