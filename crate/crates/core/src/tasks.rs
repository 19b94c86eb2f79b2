//! Synthetic benchmarks: warped and padded next-step recall, copy, variable
//! copy and adding, with their memoryless baselines.
//!
//! Every generator is a pure function of its arguments and the generator
//! state, so a sample is fully determined by `(spec, seed)`.

use std::io::{self, Write};

use crate::error::{config, Result};
use crate::exec::Exec;
use crate::numerics::{softmax_xent, Rng};

/// Alphabet of the warping tasks; symbol 0 is the dummy/pad symbol.
pub const WARP_ALPHABET: usize = 10;
pub const PAD: usize = 0;

/// Copy-task alphabet: 0..=7 content, 8 dummy, 9 signal.
pub const COPY_ALPHABET: usize = 10;
pub const COPY_CONTENT: usize = 8;
pub const COPY_DUMMY: usize = 8;
pub const COPY_SIGNAL: usize = 9;
/// Length of the prefix that has to be reproduced.
pub const COPY_PREFIX: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    Symbols(Vec<usize>),
    /// `(value, marker)` per step, for the adding task.
    Pairs(Vec<[f64; 2]>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Symbols(Vec<usize>),
    Scalar(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    pub inputs: Inputs,
    pub targets: Targets,
    pub mask: Vec<bool>,
}

impl TaskSample {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn input_symbols(&self) -> Option<&[usize]> {
        match &self.inputs {
            Inputs::Symbols(s) => Some(s),
            Inputs::Pairs(_) => None,
        }
    }

    pub fn target_symbols(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Symbols(s) => Some(s),
            Targets::Scalar(_) => None,
        }
    }

    /// Checks the structural invariants against an alphabet size.
    pub fn validate(&self, alphabet: usize) -> Result<()> {
        let len = self.mask.len();
        if !self.mask.iter().any(|&m| m) {
            return config("sample has an empty loss mask");
        }
        let input_len = match &self.inputs {
            Inputs::Symbols(s) => {
                if s.iter().any(|&c| c >= alphabet) {
                    return config("input symbol outside the alphabet");
                }
                s.len()
            }
            Inputs::Pairs(p) => p.len(),
        };
        if input_len != len {
            return config("input and mask lengths differ");
        }
        if let Targets::Symbols(t) = &self.targets {
            if t.len() != len {
                return config("target and mask lengths differ");
            }
            if t.iter().any(|&c| c >= alphabet) {
                return config("target symbol outside the alphabet");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarpMode {
    /// Every character repeated `max_warp` times.
    Uniform,
    /// Each character repeated a uniform number of times in `min_warp..=max_warp`.
    Variable,
    /// Every character followed by `max_warp - 1` pad symbols.
    UniformPad,
    /// Each character followed by a uniform number of pads in `min_warp-1..=max_warp-1`.
    VariablePad,
}

impl WarpMode {
    pub fn is_padding(self) -> bool {
        matches!(self, WarpMode::UniformPad | WarpMode::VariablePad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpSpec {
    pub mode: WarpMode,
    /// Lower end of the variable warp range; ignored by the uniform modes.
    pub min_warp: usize,
    pub max_warp: usize,
    /// Number of base characters available before warping.
    pub base_len: usize,
    /// Length after truncation.
    pub trunc_len: usize,
}

impl WarpSpec {
    pub fn new(mode: WarpMode, max_warp: usize, trunc_len: usize) -> Self {
        Self {
            mode,
            min_warp: 1,
            max_warp,
            base_len: trunc_len,
            trunc_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_warp < 1 || self.max_warp < self.min_warp {
            return config(format!(
                "warp range {}..={} is empty or starts below 1",
                self.min_warp, self.max_warp
            ));
        }
        if self.trunc_len < 1 {
            return config("trunc_len must be at least 1");
        }
        if self.base_len < self.trunc_len {
            return config("base_len must be at least trunc_len so every sample reaches trunc_len");
        }
        Ok(())
    }
}

/// Random characters from `1..alphabet`, no two neighbours equal.
fn base_characters(len: usize, alphabet: usize, rng: &mut Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    let mut prev = 0;
    for _ in 0..len {
        // alphabet - 2 choices once the previous character is excluded
        let c = if prev == PAD {
            1 + rng.below(alphabet - 1)
        } else {
            let c = 1 + rng.below(alphabet - 2);
            if c >= prev {
                c + 1
            } else {
                c
            }
        };
        out.push(c);
        prev = c;
    }
    out
}

fn check_alphabet(alphabet: usize) -> Result<()> {
    if alphabet < 3 {
        return config(format!(
            "alphabet of {alphabet} symbols cannot hold a dummy and two distinct content symbols"
        ));
    }
    Ok(())
}

/// Warped next-step recall: the target at each step is the character
/// preceding the current one, and input and target share the same repeat
/// counts.
pub fn gen_warped(spec: &WarpSpec, alphabet: usize, rng: &mut Rng) -> Result<TaskSample> {
    spec.validate()?;
    check_alphabet(alphabet)?;
    if spec.mode.is_padding() {
        return config("gen_warped needs a warping mode, not a padding mode");
    }
    let len = spec.trunc_len;
    let mut inputs = Vec::with_capacity(len);
    let mut targets = Vec::with_capacity(len);
    let mut prev = PAD;
    for c in base_characters(spec.base_len, alphabet, rng) {
        if inputs.len() >= len {
            break;
        }
        let repeats = match spec.mode {
            WarpMode::Uniform => spec.max_warp,
            _ => rng.between(spec.min_warp, spec.max_warp),
        };
        for _ in 0..repeats {
            inputs.push(c);
            targets.push(prev);
        }
        prev = c;
    }
    inputs.truncate(len);
    targets.truncate(len);
    Ok(TaskSample {
        mask: vec![true; inputs.len()],
        inputs: Inputs::Symbols(inputs),
        targets: Targets::Symbols(targets),
    })
}

/// Padded next-step recall: each character is followed by a run of pad
/// symbols; at a character step the target is the previous character, at a
/// pad step it is the pad symbol.
pub fn gen_padded(spec: &WarpSpec, alphabet: usize, rng: &mut Rng) -> Result<TaskSample> {
    spec.validate()?;
    check_alphabet(alphabet)?;
    if !spec.mode.is_padding() {
        return config("gen_padded needs a padding mode, not a warping mode");
    }
    let len = spec.trunc_len;
    let mut inputs = Vec::with_capacity(len);
    let mut targets = Vec::with_capacity(len);
    let mut prev = PAD;
    for c in base_characters(spec.base_len, alphabet, rng) {
        if inputs.len() >= len {
            break;
        }
        let pads = match spec.mode {
            WarpMode::UniformPad => spec.max_warp - 1,
            _ => rng.between(spec.min_warp - 1, spec.max_warp - 1),
        };
        inputs.push(c);
        targets.push(prev);
        for _ in 0..pads {
            inputs.push(PAD);
            targets.push(PAD);
        }
        prev = c;
    }
    inputs.truncate(len);
    targets.truncate(len);
    Ok(TaskSample {
        mask: vec![true; inputs.len()],
        inputs: Inputs::Symbols(inputs),
        targets: Targets::Symbols(targets),
    })
}

fn copy_layout(t: usize, signal_gap: usize, rng: &mut Rng) -> TaskSample {
    let len = t + 2 * COPY_PREFIX;
    let mut inputs = vec![COPY_DUMMY; len];
    let mut targets = vec![COPY_DUMMY; len];
    for slot in inputs.iter_mut().take(COPY_PREFIX) {
        *slot = rng.below(COPY_CONTENT);
    }
    // the signal sits `signal_gap` steps after the last content symbol
    let signal = COPY_PREFIX - 1 + signal_gap;
    inputs[signal] = COPY_SIGNAL;
    for k in 0..COPY_PREFIX {
        targets[signal + 1 + k] = inputs[k];
    }
    TaskSample {
        inputs: Inputs::Symbols(inputs),
        targets: Targets::Symbols(targets),
        mask: vec![true; len],
    }
}

/// Copy task of delay `t`: ten content symbols, `t - 1` dummies, the signal,
/// ten dummies; the target reproduces the content in the last ten steps.
pub fn gen_copy(t: usize, rng: &mut Rng) -> Result<TaskSample> {
    if t < 1 {
        return config("copy task needs T >= 1");
    }
    Ok(copy_layout(t, t, rng))
}

/// Variable copy: the distance from the last content symbol to the signal is
/// uniform in `1..=t` (distance `t` is the fixed copy layout). The total
/// length stays `t + 20`; the steps after the answer window are dummies.
pub fn gen_variable_copy(t: usize, rng: &mut Rng) -> Result<TaskSample> {
    if t < 1 {
        return config("variable copy task needs T >= 1");
    }
    let gap = rng.between(1, t);
    Ok(copy_layout(t, gap, rng))
}

/// Position of the signal in a (variable) copy sample.
pub fn copy_signal_position(sample: &TaskSample) -> Option<usize> {
    sample
        .input_symbols()?
        .iter()
        .position(|&c| c == COPY_SIGNAL)
}

/// Adding task: uniform values, one marker in each half (the first half is
/// `0..ceil(t/2)`), target is the sum of the two marked values. Only the last
/// step carries loss.
pub fn gen_adding(t: usize, rng: &mut Rng) -> Result<TaskSample> {
    if t < 2 {
        return config("adding task needs T >= 2");
    }
    let half = t.div_ceil(2);
    let mut pairs: Vec<[f64; 2]> = (0..t).map(|_| [rng.unit(), 0.0]).collect();
    let first = rng.below(half);
    let second = half + rng.below(t - half);
    pairs[first][1] = 1.0;
    pairs[second][1] = 1.0;
    let target = pairs[first][0] + pairs[second][0];
    let mut mask = vec![false; t];
    mask[t - 1] = true;
    Ok(TaskSample {
        inputs: Inputs::Pairs(pairs),
        targets: Targets::Scalar(target),
        mask,
    })
}

/// Loss of the best memoryless predictor on the copy task, averaged over all
/// `t + 20` steps.
pub fn copy_baseline(t: usize) -> f64 {
    COPY_PREFIX as f64 * (COPY_CONTENT as f64).ln() / (t + 2 * COPY_PREFIX) as f64
}

/// MSE of the constant predictor 1 on the adding task: the variance of a sum
/// of two independent uniforms.
pub fn adding_baseline() -> f64 {
    1.0 / 6.0
}

const MC_BLOCK: usize = 10_000;

fn blocks(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(MC_BLOCK))
        .map(|b| (b, MC_BLOCK.min(n - b * MC_BLOCK)))
        .collect()
}

/// Monte Carlo loss of a memoryless copy predictor: certain of the dummy
/// outside the answer window, uniform over the eight content symbols inside it.
/// Averaged over all steps of each sample, then over samples.
pub fn copy_baseline_monte_carlo(t: usize, n: usize, seed: u64, exec: Exec) -> Result<f64> {
    if n == 0 {
        return config("Monte Carlo estimate needs at least one sample");
    }
    // equal logits on the content symbols, the rest effectively excluded
    let mut logits = [-1e4; COPY_ALPHABET];
    logits[..COPY_CONTENT].fill(0.0);
    let sums = exec.map(&blocks(n), |&(block, count)| -> Result<f64> {
        let mut rng = Rng::derive(seed, block as u64);
        let mut total = 0.0;
        for _ in 0..count {
            let sample = gen_copy(t, &mut rng)?;
            let targets = sample.target_symbols().unwrap_or_default();
            let signal = copy_signal_position(&sample).unwrap_or(0);
            let mut loss = 0.0;
            for &target in &targets[signal + 1..signal + 1 + COPY_PREFIX] {
                loss += softmax_xent(&logits, target)?.0;
            }
            total += loss / targets.len() as f64;
        }
        Ok(total)
    });
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / n as f64)
}

/// Monte Carlo MSE of the constant predictor 1 on the adding task.
pub fn adding_baseline_monte_carlo(t: usize, n: usize, seed: u64, exec: Exec) -> Result<f64> {
    if n == 0 {
        return config("Monte Carlo estimate needs at least one sample");
    }
    let sums = exec.map(&blocks(n), |&(block, count)| -> Result<f64> {
        let mut rng = Rng::derive(seed, block as u64);
        let mut total = 0.0;
        for _ in 0..count {
            if let Targets::Scalar(y) = gen_adding(t, &mut rng)?.targets {
                total += (y - 1.0) * (y - 1.0);
            }
        }
        Ok(total)
    });
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / n as f64)
}

/// Task selection shared by training, export and the CLI.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TaskSpec {
    Warp { spec: WarpSpec, alphabet: usize },
    Copy { t: usize },
    VariableCopy { t: usize },
    Adding { t: usize },
}

impl TaskSpec {
    pub fn generate(&self, rng: &mut Rng) -> Result<TaskSample> {
        match self {
            TaskSpec::Warp { spec, alphabet } if spec.mode.is_padding() => {
                gen_padded(spec, *alphabet, rng)
            }
            TaskSpec::Warp { spec, alphabet } => gen_warped(spec, *alphabet, rng),
            TaskSpec::Copy { t } => gen_copy(*t, rng),
            TaskSpec::VariableCopy { t } => gen_variable_copy(*t, rng),
            TaskSpec::Adding { t } => gen_adding(*t, rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskSpec::Warp { spec, alphabet } => {
                spec.validate()?;
                check_alphabet(*alphabet)
            }
            TaskSpec::Copy { t } | TaskSpec::VariableCopy { t } if *t < 1 => {
                config("copy tasks need T >= 1")
            }
            TaskSpec::Adding { t } if *t < 2 => config("adding task needs T >= 2"),
            _ => Ok(()),
        }
    }

    /// Width of one input step after encoding.
    pub fn n_inputs(&self) -> usize {
        match self {
            TaskSpec::Warp { alphabet, .. } => *alphabet,
            TaskSpec::Copy { .. } | TaskSpec::VariableCopy { .. } => COPY_ALPHABET,
            TaskSpec::Adding { .. } => 2,
        }
    }

    /// Number of classes, or 1 for the regression task.
    pub fn n_outputs(&self) -> usize {
        if self.is_regression() {
            1
        } else {
            self.n_inputs()
        }
    }

    pub fn is_regression(&self) -> bool {
        matches!(self, TaskSpec::Adding { .. })
    }

    /// Length of every sample.
    pub fn seq_len(&self) -> usize {
        match self {
            TaskSpec::Warp { spec, .. } => spec.trunc_len,
            TaskSpec::Copy { t } | TaskSpec::VariableCopy { t } => t + 2 * COPY_PREFIX,
            TaskSpec::Adding { t } => *t,
        }
    }

    /// The memoryless baseline where one is defined.
    pub fn baseline(&self) -> Option<f64> {
        match self {
            TaskSpec::Copy { t } => Some(copy_baseline(*t)),
            TaskSpec::Adding { .. } => Some(adding_baseline()),
            _ => None,
        }
    }
}

/// A seeded dataset whose samples are generated on demand. Sample `i` only
/// depends on the dataset seed and `i`.
#[derive(Clone, Debug)]
pub struct Dataset {
    task: TaskSpec,
    seed: u64,
    len: usize,
}

impl Dataset {
    pub fn new(task: TaskSpec, seed: u64, len: usize) -> Result<Self> {
        task.validate()?;
        if len == 0 {
            return config("dataset needs at least one sample");
        }
        Ok(Self { task, seed, len })
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sample(&self, index: usize) -> Result<TaskSample> {
        if index >= self.len {
            return config(format!("sample {index} out of range for {} samples", self.len));
        }
        self.task.generate(&mut Rng::derive(self.seed, index as u64))
    }

    pub fn samples(&self, indices: &[usize]) -> Result<Vec<TaskSample>> {
        indices.iter().map(|&i| self.sample(i)).collect()
    }

    /// Generate every sample.
    pub fn materialize(&self, exec: Exec) -> Result<Vec<TaskSample>> {
        exec.map_range(self.len, |i| self.sample(i))
            .into_iter()
            .collect()
    }
}

/// Dataset of `n` samples keyed by a seed drawn from `rng`.
pub fn build_dataset(task: TaskSpec, n: usize, rng: &mut Rng) -> Result<Dataset> {
    Dataset::new(task, rng.next_u64(), n)
}

/// Writes samples one per line, tab-separated fields, space-separated values.
/// Symbol tasks: inputs, targets, mask. Adding: values, markers, target.
pub fn write_samples<W: Write + ?Sized>(out: &mut W, samples: &[TaskSample]) -> io::Result<()> {
    fn join<T: ToString>(items: impl Iterator<Item = T>) -> String {
        items.map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
    }
    for s in samples {
        match (&s.inputs, &s.targets) {
            (Inputs::Symbols(x), Targets::Symbols(y)) => writeln!(
                out,
                "{}\t{}\t{}",
                join(x.iter()),
                join(y.iter()),
                join(s.mask.iter().map(|&m| m as u8))
            )?,
            (Inputs::Pairs(p), Targets::Scalar(y)) => writeln!(
                out,
                "{}\t{}\t{}",
                join(p.iter().map(|v| crate::numerics::format_real(v[0]))),
                join(p.iter().map(|v| v[1] as u8)),
                crate::numerics::format_real(*y)
            )?,
            _ => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    "sample mixes symbol and real fields",
                ))
            }
        }
    }
    Ok(())
}
