//! Batched sequence forward pass, full backpropagation through time, and the
//! finite-difference gradient check.
//!
//! Buffers are time-major: row `t * batch + r` holds step `t` of batch
//! element `r`, so the input projection and all weight gradients are single
//! matrix products over every step at once.

use super::{Arch, Network, OutputKind, ParamSet};
use crate::error::{config, Error, Result};
use crate::exec::Exec;
use crate::numerics::{gemm, softmax_xent_into, Matrix, Rng, View};
use crate::tasks::{Inputs, TaskSample, Targets};

#[derive(Clone, Debug, PartialEq)]
pub enum BatchTargets {
    /// Class index per step, time-major (`len * size`).
    Classes(Vec<usize>),
    /// One real target per batch element, scored at the final step.
    Final(Vec<f64>),
}

/// Encoded, rectangular batch of sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    len: usize,
    size: usize,
    inputs: Matrix,
    targets: BatchTargets,
    mask: Vec<f64>,
}

impl Batch {
    /// `inputs` is `(len * size) x n_in`, time-major; `mask` is `len * size`.
    pub fn new(
        len: usize,
        size: usize,
        inputs: Matrix,
        targets: BatchTargets,
        mask: Vec<f64>,
    ) -> Result<Self> {
        if len == 0 || size == 0 {
            return config("batch needs at least one step and one sequence");
        }
        if inputs.rows() != len * size || mask.len() != len * size {
            return config("batch inputs or mask have the wrong number of rows");
        }
        match &targets {
            BatchTargets::Classes(c) if c.len() != len * size => {
                return config("class targets have the wrong length")
            }
            BatchTargets::Final(v) if v.len() != size => {
                return config("final targets need one value per sequence")
            }
            _ => {}
        }
        for r in 0..size {
            if !(0..len).any(|t| mask[t * size + r] > 0.0) {
                return config(format!("sequence {r} has an empty loss mask"));
            }
        }
        Ok(Self {
            len,
            size,
            inputs,
            targets,
            mask,
        })
    }

    /// One-hot encodes symbol inputs over `n_in` symbols; adding-task pairs
    /// become two features. All samples must share one length.
    pub fn from_samples(samples: &[TaskSample], n_in: usize) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Config("empty batch".into()))?;
        let len = first.len();
        let size = samples.len();
        let mut inputs = Matrix::zeros(len * size, n_in);
        let mut mask = vec![0.0; len * size];
        let mut classes = Vec::new();
        let mut finals = Vec::new();
        for (r, s) in samples.iter().enumerate() {
            if s.len() != len {
                return config("samples in a batch must have equal lengths");
            }
            s.validate(n_in.max(2))?;
            match &s.inputs {
                Inputs::Symbols(x) => {
                    for (t, &c) in x.iter().enumerate() {
                        inputs.set(t * size + r, c, 1.0);
                    }
                }
                Inputs::Pairs(p) => {
                    if n_in != 2 {
                        return config("pair inputs need n_in = 2");
                    }
                    for (t, v) in p.iter().enumerate() {
                        inputs.row_mut(t * size + r).copy_from_slice(v);
                    }
                }
            }
            for (t, &m) in s.mask.iter().enumerate() {
                mask[t * size + r] = if m { 1.0 } else { 0.0 };
            }
            match &s.targets {
                Targets::Symbols(y) => {
                    if classes.is_empty() {
                        classes = vec![0; len * size];
                    }
                    for (t, &c) in y.iter().enumerate() {
                        classes[t * size + r] = c;
                    }
                }
                Targets::Scalar(y) => finals.push(*y),
            }
        }
        let targets = match (classes.is_empty(), finals.len()) {
            (false, 0) => BatchTargets::Classes(classes),
            (true, n) if n == size => BatchTargets::Final(finals),
            _ => return config("batch mixes symbol and scalar targets"),
        };
        Self::new(len, size, inputs, targets, mask)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &BatchTargets {
        &self.targets
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Tape {
    arch: Arch,
    n_hidden: usize,
    n_out: usize,
    len: usize,
    size: usize,
    inputs: Matrix,
    /// Post-nonlinearity activations per step, `(len*size) x (blocks*n_h)`.
    acts: Vec<f64>,
    /// Hidden states including the zero initial state, `((len+1)*size) x n_h`.
    hs: Vec<f64>,
    /// LSTM cell states, same layout as `hs`.
    cs: Vec<f64>,
    alpha: Vec<f64>,
    /// Loss gradient with respect to the readout outputs. Classification:
    /// `(len*size) x n_out`; regression: `size x 1` for the final step.
    d_out: Vec<f64>,
    loss: f64,
    stats: EvalStats,
}

impl Tape {
    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn stats(&self) -> EvalStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Hidden state after step `t` (`t = 0` is the initial zero state).
    pub fn hidden(&self, t: usize) -> Matrix {
        let n = self.size * self.n_hidden;
        Matrix::from_vec(self.size, self.n_hidden, self.hs[t * n..(t + 1) * n].to_vec())
            .expect("tape slice has the recorded shape")
    }

    /// LSTM cell state after step `t`.
    pub fn cell(&self, t: usize) -> Option<Matrix> {
        if self.cs.is_empty() {
            return None;
        }
        let n = self.size * self.n_hidden;
        Matrix::from_vec(self.size, self.n_hidden, self.cs[t * n..(t + 1) * n].to_vec()).ok()
    }

    /// Recomputes step `t` from the recorded state before it and compares
    /// with the recorded state after it, bit for bit.
    pub fn replays_step(&self, net: &Network, t: usize) -> Result<bool> {
        let cell = &net.cell;
        if cell.arch() != self.arch || cell.n_hidden() != self.n_hidden || t >= self.len {
            return config("tape does not match these parameters");
        }
        let (n, size) = (self.n_hidden, self.size);
        let gn = self.arch.blocks() * n;
        let x = View::new(
            self.inputs.rows_slice(t * size, (t + 1) * size),
            size,
            self.inputs.cols(),
        );
        let mut acts = vec![0.0; size * gn];
        gemm(1.0, x, cell.wx.view().t(), 0.0, &mut acts);
        let mut h = vec![0.0; size * n];
        let mut c = vec![0.0; if self.cs.is_empty() { 0 } else { size * n }];
        let span = |t: usize| t * size * n..(t + 1) * size * n;
        let c_prev = if self.cs.is_empty() { &[][..] } else { &self.cs[span(t)] };
        cell.advance(size, &mut acts, &self.hs[span(t)], c_prev, &mut h, &mut c, &self.alpha);
        let c_ok = self.cs.is_empty() || c[..] == self.cs[span(t + 1)];
        Ok(h[..] == self.hs[span(t + 1)] && c_ok && acts[..] == self.acts[t * size * gn..(t + 1) * size * gn])
    }
}

/// Loss and accuracy summed or averaged over the samples of a pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    /// Masked steps whose argmax matched the target (classification only).
    pub correct: usize,
    /// Masked steps considered for accuracy (classification only).
    pub counted: usize,
}

impl EvalStats {
    /// Fraction of correct masked steps, or -1 when accuracy is undefined.
    pub fn accuracy(&self) -> f64 {
        if self.counted == 0 {
            -1.0
        } else {
            self.correct as f64 / self.counted as f64
        }
    }

    fn merge(&mut self, other: &EvalStats) {
        self.loss += other.loss;
        self.correct += other.correct;
        self.counted += other.counted;
    }
}

impl Network {
    fn check_batch(&self, batch: &Batch) -> Result<()> {
        self.cell.check()?;
        if batch.inputs.cols() != self.cell.n_in() {
            return config(format!(
                "batch has {} input features, cell expects {}",
                batch.inputs.cols(),
                self.cell.n_in()
            ));
        }
        if self.readout.w.cols() != self.cell.n_hidden() {
            return config("readout does not match the hidden size");
        }
        match (&batch.targets, self.output) {
            (BatchTargets::Classes(c), OutputKind::Classes) => {
                if c.iter().any(|&k| k >= self.readout.n_out()) {
                    return config("class target outside the readout");
                }
            }
            (BatchTargets::Final(_), OutputKind::Regression) => {}
            _ => return config("batch targets do not match the output kind"),
        }
        Ok(())
    }

    /// Mean loss over the batch, and the tape for [`Network::backward`].
    pub fn forward(&self, batch: &Batch) -> Result<(f64, Tape)> {
        let tape = self.forward_normalized(batch, batch.size as f64)?;
        Ok((tape.loss, tape))
    }

    /// Forward pass whose loss is the sum of per-sequence losses divided by
    /// `norm`. Classification sequences contribute the mean cross-entropy over
    /// their masked steps; regression sequences the squared error of the
    /// final-step output.
    pub(crate) fn forward_normalized(&self, batch: &Batch, norm: f64) -> Result<Tape> {
        self.check_batch(batch)?;
        let cell = &self.cell;
        let (len, size, n) = (batch.len, batch.size, cell.n_hidden());
        let gn = cell.arch().blocks() * n;
        let lstm = cell.arch() == Arch::Lstm;
        let alpha = cell.alpha();

        let mut acts = vec![0.0; len * size * gn];
        gemm(1.0, batch.inputs.view(), cell.wx.view().t(), 0.0, &mut acts);
        let mut hs = vec![0.0; (len + 1) * size * n];
        let mut cs = vec![0.0; if lstm { (len + 1) * size * n } else { 0 }];
        let step = size * n;
        for t in 0..len {
            let (h_done, h_rest) = hs.split_at_mut((t + 1) * step);
            let (c_prev, c_next): (&[f64], &mut [f64]) = if lstm {
                let (done, rest) = cs.split_at_mut((t + 1) * step);
                (&done[t * step..], &mut rest[..step])
            } else {
                (&[], &mut [])
            };
            cell.advance(
                size,
                &mut acts[t * size * gn..(t + 1) * size * gn],
                &h_done[t * step..],
                c_prev,
                &mut h_rest[..step],
                c_next,
                &alpha,
            );
        }

        let readout = &self.readout;
        let k = readout.n_out();
        let mut stats = EvalStats::default();
        let d_out = match &batch.targets {
            BatchTargets::Classes(classes) => {
                let rows = len * size;
                let mut logits = vec![0.0; rows * k];
                for r in 0..rows {
                    logits[r * k..(r + 1) * k].copy_from_slice(&readout.b);
                }
                gemm(
                    1.0,
                    View::new(&hs[step..], rows, n),
                    readout.w.view().t(),
                    1.0,
                    &mut logits,
                );
                let mut active = vec![0.0; size];
                for (i, &m) in batch.mask.iter().enumerate() {
                    active[i % size] += m;
                }
                let mut d = vec![0.0; rows * k];
                for i in 0..rows {
                    let m = batch.mask[i];
                    if m == 0.0 {
                        continue;
                    }
                    let l = &logits[i * k..(i + 1) * k];
                    let g = &mut d[i * k..(i + 1) * k];
                    let xent = softmax_xent_into(l, classes[i], g);
                    let w = m / (active[i % size] * norm);
                    stats.loss += w * xent;
                    for v in g.iter_mut() {
                        *v *= w;
                    }
                    let best = l
                        .iter()
                        .enumerate()
                        .fold(0, |b, (j, &v)| if v > l[b] { j } else { b });
                    stats.counted += 1;
                    stats.correct += usize::from(best == classes[i]);
                }
                d
            }
            BatchTargets::Final(values) => {
                let last = &hs[len * step..];
                let mut d = vec![0.0; size];
                for r in 0..size {
                    let h = &last[r * n..(r + 1) * n];
                    let y = readout.w.row(0).iter().zip(h).fold(readout.b[0], |a, (w, h)| a + w * h);
                    let err = y - values[r];
                    stats.loss += err * err / norm;
                    d[r] = 2.0 * err / norm;
                }
                d
            }
        };
        Ok(Tape {
            arch: cell.arch(),
            n_hidden: n,
            n_out: k,
            len,
            size,
            inputs: batch.inputs.clone(),
            acts,
            hs,
            cs,
            alpha,
            d_out,
            loss: stats.loss,
            stats,
        })
    }

    /// Exact gradient of the taped loss with respect to every parameter.
    pub fn backward(&self, tape: &Tape) -> Result<Network> {
        let cell = &self.cell;
        if cell.arch() != tape.arch
            || cell.n_hidden() != tape.n_hidden
            || cell.n_in() != tape.inputs.cols()
            || self.readout.n_out() != tape.n_out
        {
            return config("tape was recorded with different parameters");
        }
        let (len, size, n) = (tape.len, tape.size, tape.n_hidden);
        let arch = tape.arch;
        let gn = arch.blocks() * n;
        let rows = len * size;
        let step = size * n;
        let mut grad = self.zeros_like();

        // readout
        let mut dh_out = vec![0.0; rows * n];
        match self.output {
            OutputKind::Classes => {
                let k = tape.n_out;
                let d = View::new(&tape.d_out, rows, k);
                gemm(1.0, d.t(), View::new(&tape.hs[step..], rows, n), 0.0, grad.readout.w.as_mut_slice());
                for i in 0..rows {
                    for (b, v) in grad.readout.b.iter_mut().zip(&tape.d_out[i * k..(i + 1) * k]) {
                        *b += v;
                    }
                }
                gemm(1.0, d, self.readout.w.view(), 0.0, &mut dh_out);
            }
            OutputKind::Regression => {
                let last = &tape.hs[len * step..];
                let w_out = self.readout.w.row(0);
                for r in 0..size {
                    let dy = tape.d_out[r];
                    grad.readout.b[0] += dy;
                    for j in 0..n {
                        grad.readout.w.as_mut_slice()[j] += dy * last[r * n + j];
                        dh_out[(len - 1) * step + r * n + j] = dy * w_out[j];
                    }
                }
            }
        }

        let mut d_pre = vec![0.0; rows * gn];
        let mut carry_h = vec![0.0; step];
        let mut carry_c = vec![0.0; if arch == Arch::Lstm { step } else { 0 }];
        let mut d_leak = vec![0.0; if arch == Arch::Leaky { n } else { 0 }];
        let alpha = &tape.alpha;
        for t in (0..len).rev() {
            let acts = &tape.acts[t * size * gn..(t + 1) * size * gn];
            let dp = &mut d_pre[t * size * gn..(t + 1) * size * gn];
            let h_prev = &tape.hs[t * step..(t + 1) * step];
            for r in 0..size {
                let a = &acts[r * gn..(r + 1) * gn];
                let d = &mut dp[r * gn..(r + 1) * gn];
                for j in 0..n {
                    let idx = r * n + j;
                    let dh = dh_out[t * step + idx] + carry_h[idx];
                    carry_h[idx] = match arch {
                        Arch::Rnn => {
                            d[j] = dh * (1.0 - a[j] * a[j]);
                            0.0
                        }
                        Arch::Leaky => {
                            let (u, al) = (a[j], alpha[j]);
                            d[j] = dh * al * (1.0 - u * u);
                            d_leak[j] += dh * (u - h_prev[idx]) * al * (1.0 - al);
                            dh * (1.0 - al)
                        }
                        Arch::Gated => {
                            let (u, g) = (a[j], a[n + j]);
                            d[j] = dh * g * (1.0 - u * u);
                            d[n + j] = dh * (u - h_prev[idx]) * g * (1.0 - g);
                            dh * (1.0 - g)
                        }
                        Arch::Lstm => {
                            let (i, f, g, o) = (a[j], a[n + j], a[2 * n + j], a[3 * n + j]);
                            let c = tape.cs[(t + 1) * step + idx];
                            let c_prev = tape.cs[t * step + idx];
                            let tc = c.tanh();
                            let dc = carry_c[idx] + dh * o * (1.0 - tc * tc);
                            d[j] = dc * g * i * (1.0 - i);
                            d[n + j] = dc * c_prev * f * (1.0 - f);
                            d[2 * n + j] = dc * i * (1.0 - g * g);
                            d[3 * n + j] = dh * tc * o * (1.0 - o);
                            carry_c[idx] = dc * f;
                            0.0
                        }
                    };
                }
            }
            gemm(1.0, View::new(dp, size, gn), cell.wh.view(), 1.0, &mut carry_h);
        }

        let dp = View::new(&d_pre, rows, gn);
        gemm(1.0, dp.t(), tape.inputs.view(), 0.0, grad.cell.wx.as_mut_slice());
        gemm(1.0, dp.t(), View::new(&tape.hs, rows, n), 0.0, grad.cell.wh.as_mut_slice());
        for i in 0..rows {
            for (b, v) in grad.cell.b.iter_mut().zip(&d_pre[i * gn..(i + 1) * gn]) {
                *b += v;
            }
        }
        grad.cell.leak = d_leak;
        Ok(grad)
    }

    /// Mean loss and gradient over `samples`, processed in fixed chunks of
    /// `chunk` sequences. Chunk results are summed in order, so the result
    /// does not depend on the executor.
    pub fn loss_and_grad(
        &self,
        samples: &[TaskSample],
        chunk: usize,
        exec: Exec,
    ) -> Result<(f64, Network)> {
        let norm = samples.len() as f64;
        let parts: Vec<&[TaskSample]> = samples.chunks(chunk.max(1)).collect();
        let results = exec.map(&parts, |part| -> Result<(f64, Network)> {
            let batch = Batch::from_samples(part, self.cell.n_in())?;
            let tape = self.forward_normalized(&batch, norm)?;
            Ok((tape.loss, self.backward(&tape)?))
        });
        let mut loss = 0.0;
        let mut grad: Option<Network> = None;
        for r in results {
            let (l, g) = r?;
            loss += l;
            match grad.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grad = Some(g),
            }
        }
        let grad = grad.ok_or_else(|| Error::Config("empty batch".into()))?;
        Ok((loss, grad))
    }

    /// Mean loss and pooled accuracy over `samples`; parameters are only read.
    pub fn evaluate(&self, samples: &[TaskSample], chunk: usize, exec: Exec) -> Result<EvalStats> {
        if samples.is_empty() {
            return config("nothing to evaluate");
        }
        let norm = samples.len() as f64;
        let parts: Vec<&[TaskSample]> = samples.chunks(chunk.max(1)).collect();
        let results = exec.map(&parts, |part| -> Result<EvalStats> {
            let batch = Batch::from_samples(part, self.cell.n_in())?;
            Ok(self.forward_normalized(&batch, norm)?.stats)
        });
        let mut total = EvalStats::default();
        for r in results {
            total.merge(&r?);
        }
        Ok(total)
    }
}

/// Largest relative error `|a - n| / max(1e-8, |a| + |n|)` between the
/// analytic gradient and central differences with step `eps`.
pub fn max_relative_error(net: &Network, batch: &Batch, eps: f64) -> Result<f64> {
    let (_, tape) = net.forward(batch)?;
    let analytic = net.backward(&tape)?;
    if !analytic.is_finite() {
        return Err(Error::Numerical {
            iteration: 0,
            detail: "non-finite analytic gradient".into(),
        });
    }
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    let blocks: Vec<(&'static str, Vec<f64>)> = analytic
        .blocks()
        .into_iter()
        .map(|(name, b)| (name, b.to_vec()))
        .collect();
    for (bi, (name, grads)) in blocks.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = probe.blocks()[bi].1[i];
            probe.blocks_mut()[bi].1[i] = orig + eps;
            let plus = probe.forward(batch)?.0;
            probe.blocks_mut()[bi].1[i] = orig - eps;
            let minus = probe.forward(batch)?.0;
            probe.blocks_mut()[bi].1[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::Numerical {
                    iteration: 0,
                    detail: format!("non-finite finite difference in {name}[{i}]"),
                });
            }
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Builds a random classification instance (batch of 2, 3 real input
/// features, 4 classes, random loss mask) and returns the largest relative
/// error between analytic and finite-difference gradients.
pub fn grad_check(arch: Arch, n_hidden: usize, seq_len: usize, seed: u64) -> Result<f64> {
    if n_hidden == 0 || seq_len == 0 {
        return config("gradient check needs n_h >= 1 and seq_len >= 1");
    }
    let (n_in, n_out, size) = (3, 4, 2);
    let mut rng = Rng::new(seed);
    let mut net = Network::random(arch, n_in, n_hidden, n_out, OutputKind::Classes, &mut rng)?;
    for v in net.cell.b.iter_mut().chain(net.cell.leak.iter_mut()) {
        *v = rng.uniform(-1.0, 1.0)?;
    }
    for v in &mut net.readout.b {
        *v = rng.uniform(-0.5, 0.5)?;
    }
    let rows = seq_len * size;
    let inputs = Matrix::uniform(rows, n_in, -1.0, 1.0, &mut rng)?;
    let classes = (0..rows).map(|_| rng.below(n_out)).collect();
    let mut mask: Vec<f64> = (0..rows)
        .map(|_| if rng.unit() < 0.7 { 1.0 } else { 0.0 })
        .collect();
    for r in 0..size {
        mask[(seq_len - 1) * size + r] = 1.0;
    }
    let batch = Batch::new(seq_len, size, inputs, BatchTargets::Classes(classes), mask)?;
    max_relative_error(&net, &batch, 1e-5)
}
