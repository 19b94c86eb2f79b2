//! Dense linear algebra, activations, losses and the seeded generator.
//!
//! Everything is `f64`. Matrices are row-major. The hot path (batched
//! matrix products inside the recurrent passes) goes through
//! [`matrixmultiply`]; the single-vector helpers are plain loops.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{config, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return config(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return config("ragged rows");
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(rows.len(), cols, data)
    }

    /// Entries drawn independently from `[lo, hi)`.
    pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(rng.uniform(lo, hi)?);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Contiguous block of rows `[start, end)`.
    pub fn rows_slice(&self, start: usize, end: usize) -> &[f64] {
        &self.data[start * self.cols..end * self.cols]
    }

    pub fn rows_slice_mut(&mut self, start: usize, end: usize) -> &mut [f64] {
        &mut self.data[start * self.cols..end * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn view(&self) -> View<'_> {
        View::new(&self.data, self.rows, self.cols)
    }
}

/// `W x + b`.
pub fn affine(w: &Matrix, x: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if w.cols != x.len() || w.rows != b.len() {
        return config(format!(
            "affine: W is {}x{}, x has {}, b has {}",
            w.rows,
            w.cols,
            x.len(),
            b.len()
        ));
    }
    Ok((0..w.rows)
        .map(|r| {
            w.row(r)
                .iter()
                .zip(x)
                .fold(b[r], |acc, (wi, xi)| acc + wi * xi)
        })
        .collect())
}

/// Logistic function, evaluated on the branch that cannot overflow.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}

pub fn tanh_act(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

/// Cross-entropy of `softmax(logits)` against `target`, in nats, plus its
/// gradient `softmax(logits) - onehot(target)`.
pub fn softmax_xent(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return config(format!(
            "target {target} out of range for {} classes",
            logits.len()
        ));
    }
    let mut grad = vec![0.0; logits.len()];
    let loss = softmax_xent_into(logits, target, &mut grad);
    Ok((loss, grad))
}

/// Unchecked form used by the batched passes. Writes the gradient into `grad`.
pub(crate) fn softmax_xent_into(logits: &[f64], target: usize, grad: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (g, &l) in grad.iter_mut().zip(logits) {
        *g = (l - max).exp();
        total += *g;
    }
    for g in grad.iter_mut() {
        *g /= total;
    }
    grad[target] -= 1.0;
    total.ln() - (logits[target] - max)
}

/// Seeded pseudo-random generator.
///
/// Backed by xoshiro256++ seeded through SplitMix64 (`seed_from_u64`). The
/// stream for a given seed is fixed for this implementation; sub-streams for
/// independent purposes come from [`Rng::derive`].
#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256PlusPlus,
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    /// Generator for sub-stream `stream` of master seed `seed`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let key = mix64(seed ^ mix64(stream.wrapping_add(0x9E37_79B9_7F4A_7C15)));
        Self::new(key)
    }

    /// Sample from `[lo, hi)`; `lo == hi` returns `lo`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> Result<f64> {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return config(format!("uniform: empty or non-finite range [{lo}, {hi})"));
        }
        if lo == hi {
            return Ok(lo);
        }
        let v = lo + (hi - lo) * self.unit();
        Ok(if v >= hi { hi.next_down() } else { v })
    }

    /// Sample from `[0, 1)` with 53 random bits.
    pub fn unit(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in `[0, n)`. Panics when `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn between(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Seventeen significant digits in scientific notation; parses back to the
/// same `f64`.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

/// `rng_uniform` as a free function.
pub fn rng_uniform(rng: &mut Rng, lo: f64, hi: f64) -> Result<f64> {
    rng.uniform(lo, hi)
}

/// Strided read-only view used to feed `dgemm` without copying transposes.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    pub(crate) fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "view larger than its buffer");
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha * a * b + beta * c` with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the views were built over slices holding at least rows*cols
    // entries with row-major or transposed-row-major strides, and `c` holds
    // m*n entries, so every index dgemm touches is in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
