//! Recurrent cell families and the affine readout.
//!
//! All four families share one parameter layout: the per-block input and
//! recurrent weights are stacked row-wise into `wx` (`blocks*n_h x n_in`) and
//! `wh` (`blocks*n_h x n_h`), biases into `b`. Block order:
//!
//! | arch  | blocks                              |
//! |-------|-------------------------------------|
//! | rnn   | candidate                           |
//! | leaky | candidate (plus per-unit leak `a`)  |
//! | gated | candidate, update gate              |
//! | lstm  | input, forget, candidate, output    |
//!
//! A batch of states is a matrix with one row per batch element.

mod bptt;

use std::fmt;
use std::str::FromStr;

pub use bptt::{grad_check, max_relative_error, Batch, BatchTargets, EvalStats, Tape};

use crate::error::{config, Error, Result};
use crate::numerics::{gemm, sigmoid_scalar, Matrix, Rng, View};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    /// `h' = tanh(Wx x + Wh h + b)`
    Rnn,
    /// `h' = α tanh(Wx x + Wh h + b) + (1 - α) h` with a learned per-unit α.
    Leaky,
    /// Like `Leaky`, with α replaced by a sigmoid gate of `x` and `h`.
    Gated,
    /// LSTM without peepholes.
    Lstm,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Rnn, Arch::Leaky, Arch::Gated, Arch::Lstm];

    pub fn blocks(self) -> usize {
        match self {
            Arch::Rnn | Arch::Leaky => 1,
            Arch::Gated => 2,
            Arch::Lstm => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Rnn => "rnn",
            Arch::Leaky => "leaky",
            Arch::Gated => "gated",
            Arch::Lstm => "lstm",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}`")))
    }
}

/// Names for the row blocks of the stacked parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Candidate,
    /// The gate `g` of the gated RNN.
    Update,
    Input,
    Forget,
    Output,
}

fn block_index(arch: Arch, gate: Gate) -> Option<usize> {
    match (arch, gate) {
        (Arch::Rnn | Arch::Leaky | Arch::Gated, Gate::Candidate) => Some(0),
        (Arch::Gated, Gate::Update) => Some(1),
        (Arch::Lstm, Gate::Input) => Some(0),
        (Arch::Lstm, Gate::Forget) => Some(1),
        (Arch::Lstm, Gate::Candidate) => Some(2),
        (Arch::Lstm, Gate::Output) => Some(3),
        _ => None,
    }
}

/// Weights and biases of one recurrent layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CellParams {
    arch: Arch,
    n_in: usize,
    n_hidden: usize,
    pub wx: Matrix,
    pub wh: Matrix,
    pub b: Vec<f64>,
    /// Leak logits `a`, one per unit, `α = σ(a)`. Empty unless `Leaky`.
    pub leak: Vec<f64>,
}

impl CellParams {
    pub fn zeros(arch: Arch, n_in: usize, n_hidden: usize) -> Self {
        let rows = arch.blocks() * n_hidden;
        Self {
            arch,
            n_in,
            n_hidden,
            wx: Matrix::zeros(rows, n_in),
            wh: Matrix::zeros(rows, n_hidden),
            b: vec![0.0; rows],
            leak: if arch == Arch::Leaky {
                vec![0.0; n_hidden]
            } else {
                Vec::new()
            },
        }
    }

    /// Weights uniform in `±1/sqrt(n_in + n_hidden)`; biases and leak logits zero.
    pub fn random(arch: Arch, n_in: usize, n_hidden: usize, rng: &mut Rng) -> Result<Self> {
        if n_in == 0 || n_hidden == 0 {
            return config("cell needs at least one input and one hidden unit");
        }
        let mut p = Self::zeros(arch, n_in, n_hidden);
        let r = 1.0 / ((n_in + n_hidden) as f64).sqrt();
        p.wx = Matrix::uniform(p.wx.rows(), n_in, -r, r, rng)?;
        p.wh = Matrix::uniform(p.wh.rows(), n_hidden, -r, r, rng)?;
        Ok(p)
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }

    fn block_range(&self, gate: Gate) -> Result<std::ops::Range<usize>> {
        let k = block_index(self.arch, gate).ok_or_else(|| {
            Error::Config(format!("{} cells have no {gate:?} block", self.arch))
        })?;
        Ok(k * self.n_hidden..(k + 1) * self.n_hidden)
    }

    pub fn bias(&self, gate: Gate) -> Result<&[f64]> {
        let r = self.block_range(gate)?;
        Ok(&self.b[r])
    }

    pub fn bias_mut(&mut self, gate: Gate) -> Result<&mut [f64]> {
        let r = self.block_range(gate)?;
        Ok(&mut self.b[r])
    }

    /// Rows of `wx` belonging to `gate`.
    pub fn wx_block(&self, gate: Gate) -> Result<&[f64]> {
        let r = self.block_range(gate)?;
        Ok(self.wx.rows_slice(r.start, r.end))
    }

    pub fn wx_block_mut(&mut self, gate: Gate) -> Result<&mut [f64]> {
        let r = self.block_range(gate)?;
        Ok(self.wx.rows_slice_mut(r.start, r.end))
    }

    /// Rows of `wh` belonging to `gate`.
    pub fn wh_block(&self, gate: Gate) -> Result<&[f64]> {
        let r = self.block_range(gate)?;
        Ok(self.wh.rows_slice(r.start, r.end))
    }

    pub fn wh_block_mut(&mut self, gate: Gate) -> Result<&mut [f64]> {
        let r = self.block_range(gate)?;
        Ok(self.wh.rows_slice_mut(r.start, r.end))
    }

    /// Per-unit leak `α = σ(a)` (empty unless `Leaky`).
    pub fn alpha(&self) -> Vec<f64> {
        self.leak.iter().map(|&a| sigmoid_scalar(a)).collect()
    }

    pub fn zero_state(&self, batch: usize) -> CellState {
        CellState {
            h: Matrix::zeros(batch, self.n_hidden),
            c: (self.arch == Arch::Lstm).then(|| Matrix::zeros(batch, self.n_hidden)),
        }
    }

    pub(crate) fn check(&self) -> Result<()> {
        let rows = self.arch.blocks() * self.n_hidden;
        let leak = if self.arch == Arch::Leaky { self.n_hidden } else { 0 };
        if self.wx.rows() != rows
            || self.wx.cols() != self.n_in
            || self.wh.rows() != rows
            || self.wh.cols() != self.n_hidden
            || self.b.len() != rows
            || self.leak.len() != leak
        {
            return config(format!("{} parameters have inconsistent shapes", self.arch));
        }
        Ok(())
    }

    /// One step for a batch: `x` is `batch x n_in`.
    ///
    /// For the gated family the gate values are returned alongside the state.
    pub fn step(&self, x: &Matrix, state: &CellState) -> Result<StepOutput> {
        self.check()?;
        let batch = x.rows();
        if x.cols() != self.n_in
            || state.h.rows() != batch
            || state.h.cols() != self.n_hidden
            || (self.arch == Arch::Lstm) != state.c.is_some()
        {
            return config("step: input or state does not match the cell");
        }
        let gn = self.arch.blocks() * self.n_hidden;
        let mut acts = vec![0.0; batch * gn];
        gemm(1.0, x.view(), self.wx.view().t(), 0.0, &mut acts);
        let mut h = Matrix::zeros(batch, self.n_hidden);
        let mut c = state.c.as_ref().map(|c| Matrix::zeros(c.rows(), c.cols()));
        let c_prev = state.c.as_ref().map_or(&[][..], |c| c.as_slice());
        self.advance(
            batch,
            &mut acts,
            state.h.as_slice(),
            c_prev,
            h.as_mut_slice(),
            c.as_mut().map_or(&mut [][..], |c| c.as_mut_slice()),
            &self.alpha(),
        );
        let gate = (self.arch == Arch::Gated).then(|| {
            let n = self.n_hidden;
            let mut g = Matrix::zeros(batch, n);
            for r in 0..batch {
                g.row_mut(r).copy_from_slice(&acts[r * gn + n..r * gn + 2 * n]);
            }
            g
        });
        Ok(StepOutput {
            state: CellState { h, c },
            gate,
        })
    }

    /// Shared recurrence kernel.
    ///
    /// On entry `acts` holds the input projection `x Wxᵀ` for `batch` rows;
    /// on exit it holds the activations (tanh candidate and sigmoid gates) the
    /// backward pass needs.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn advance(
        &self,
        batch: usize,
        acts: &mut [f64],
        h_prev: &[f64],
        c_prev: &[f64],
        h_next: &mut [f64],
        c_next: &mut [f64],
        alpha: &[f64],
    ) {
        let n = self.n_hidden;
        let gn = self.arch.blocks() * n;
        gemm(
            1.0,
            View::new(h_prev, batch, n),
            self.wh.view().t(),
            1.0,
            acts,
        );
        for r in 0..batch {
            let a = &mut acts[r * gn..(r + 1) * gn];
            for (v, bias) in a.iter_mut().zip(&self.b) {
                *v += bias;
            }
            let hp = &h_prev[r * n..(r + 1) * n];
            let hn = &mut h_next[r * n..(r + 1) * n];
            match self.arch {
                Arch::Rnn => {
                    for j in 0..n {
                        a[j] = a[j].tanh();
                        hn[j] = a[j];
                    }
                }
                Arch::Leaky => {
                    for j in 0..n {
                        a[j] = a[j].tanh();
                        hn[j] = alpha[j] * a[j] + (1.0 - alpha[j]) * hp[j];
                    }
                }
                Arch::Gated => {
                    for j in 0..n {
                        let u = a[j].tanh();
                        let g = sigmoid_scalar(a[n + j]);
                        a[j] = u;
                        a[n + j] = g;
                        hn[j] = g * u + (1.0 - g) * hp[j];
                    }
                }
                Arch::Lstm => {
                    let cp = &c_prev[r * n..(r + 1) * n];
                    let cn = &mut c_next[r * n..(r + 1) * n];
                    for j in 0..n {
                        let i = sigmoid_scalar(a[j]);
                        let f = sigmoid_scalar(a[n + j]);
                        let g = a[2 * n + j].tanh();
                        let o = sigmoid_scalar(a[3 * n + j]);
                        a[j] = i;
                        a[n + j] = f;
                        a[2 * n + j] = g;
                        a[3 * n + j] = o;
                        cn[j] = f * cp[j] + i * g;
                        hn[j] = o * cn[j].tanh();
                    }
                }
            }
        }
    }
}

/// Hidden state (and LSTM cell memory) for a batch, one row per element.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub h: Matrix,
    pub c: Option<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub state: CellState,
    /// Gate values `g_t`, gated family only.
    pub gate: Option<Matrix>,
}

/// Affine map from the hidden state to logits (or to the scalar output of a
/// regression task).
#[derive(Clone, Debug, PartialEq)]
pub struct Readout {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Readout {
    pub fn zeros(n_out: usize, n_hidden: usize) -> Self {
        Self {
            w: Matrix::zeros(n_out, n_hidden),
            b: vec![0.0; n_out],
        }
    }

    pub fn random(n_out: usize, n_hidden: usize, rng: &mut Rng) -> Result<Self> {
        let r = 1.0 / (n_hidden as f64).sqrt();
        Ok(Self {
            w: Matrix::uniform(n_out, n_hidden, -r, r, rng)?,
            b: vec![0.0; n_out],
        })
    }

    pub fn n_out(&self) -> usize {
        self.w.rows()
    }

    /// `h W_outᵀ + b_out` for every row of `h`.
    pub fn logits(&self, h: &Matrix) -> Result<Matrix> {
        if h.cols() != self.w.cols() || self.b.len() != self.w.rows() {
            return config("readout: hidden size does not match");
        }
        let mut out = Matrix::zeros(h.rows(), self.w.rows());
        for r in 0..h.rows() {
            out.row_mut(r).copy_from_slice(&self.b);
        }
        gemm(1.0, h.view(), self.w.view().t(), 1.0, out.as_mut_slice());
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputKind {
    /// Softmax cross-entropy at every masked step.
    Classes,
    /// Squared error of a scalar output at the final step.
    Regression,
}

/// Named parameter blocks, used by the optimizer and the gradient check.
pub trait ParamSet {
    fn blocks(&self) -> Vec<(&'static str, &[f64])>;
    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }
}

/// A recurrent layer plus readout. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub cell: CellParams,
    pub readout: Readout,
    pub output: OutputKind,
}

impl Network {
    pub fn random(
        arch: Arch,
        n_in: usize,
        n_hidden: usize,
        n_out: usize,
        output: OutputKind,
        rng: &mut Rng,
    ) -> Result<Self> {
        if output == OutputKind::Regression && n_out != 1 {
            return config("regression readout has a single output");
        }
        Ok(Self {
            cell: CellParams::random(arch, n_in, n_hidden, rng)?,
            readout: Readout::random(n_out, n_hidden, rng)?,
            output,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            cell: CellParams::zeros(self.cell.arch, self.cell.n_in, self.cell.n_hidden),
            readout: Readout::zeros(self.readout.n_out(), self.cell.n_hidden),
            output: self.output,
        }
    }

    pub fn arch(&self) -> Arch {
        self.cell.arch
    }

    /// Elementwise `self += other` over all parameter blocks.
    pub fn add_assign(&mut self, other: &Network) {
        for ((_, dst), (_, src)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }
}

impl ParamSet for Network {
    fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = vec![
            ("W_x", self.cell.wx.as_slice()),
            ("W_h", self.cell.wh.as_slice()),
            ("b", &self.cell.b[..]),
        ];
        if !self.cell.leak.is_empty() {
            out.push(("a", &self.cell.leak[..]));
        }
        out.push(("W_out", self.readout.w.as_slice()));
        out.push(("b_out", &self.readout.b[..]));
        out
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = vec![
            ("W_x", self.cell.wx.as_mut_slice()),
            ("W_h", self.cell.wh.as_mut_slice()),
            ("b", &mut self.cell.b[..]),
        ];
        if !self.cell.leak.is_empty() {
            out.push(("a", &mut self.cell.leak[..]));
        }
        out.push(("W_out", self.readout.w.as_mut_slice()));
        out.push(("b_out", &mut self.readout.b[..]));
        out
    }
}
