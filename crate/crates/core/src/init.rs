//! Gate-bias initialization policies.
//!
//! A gate value `g` corresponds to a forgetting time of about `1/g` steps, so
//! the policies pick biases that put those times in a target range:
//!
//! * standard: LSTM forget bias set to a constant (1 by default);
//! * chrono: LSTM `b_f = log(u)`, `b_i = -b_f`, `u ~ U([1, T_max - 1])`;
//! * gate range: gated-RNN `b_g = -log(u - 1)`, `u ~ U([T_min, T_max])`, so
//!   `σ(b_g) = 1/u`;
//! * heavy tail: per-unit time range `k` drawn with `P(k) ∝ 1/(k log(k+1)^2)`.
//!
//! Only biases change; weight matrices are never touched.

use std::fmt;

use crate::cells::{Arch, CellParams, Gate};
use crate::error::{config, Result};
use crate::numerics::Rng;

/// Smallest admissible `T_min - 1` for [`gate_range_init`].
pub const GATE_RANGE_EPS: f64 = 1e-6;

/// Default truncation of the heavy-tailed time-range distribution.
pub const DEFAULT_T_CAP: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitPolicy {
    /// Architecture default: LSTM forget bias 1, every other bias zero.
    Default,
    Standard { forget_bias: f64 },
    /// `integer` draws `u` from the integers `1..=T_max-1` instead of the
    /// real interval.
    Chrono { t_max: f64, integer: bool },
    GateRange { t_min: f64, t_max: f64 },
    HeavyTail { t_cap: usize },
}

impl InitPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            InitPolicy::Default => "default",
            InitPolicy::Standard { .. } => "standard",
            InitPolicy::Chrono { .. } => "chrono",
            InitPolicy::GateRange { .. } => "gate-range",
            InitPolicy::HeavyTail { .. } => "heavy-tail",
        }
    }

    /// Checks the policy parameters and that `arch` has the gates it sets.
    pub fn validate_for(&self, arch: Arch) -> Result<()> {
        let needs = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                config(format!("{} initialization applies to {what}, not {arch}", self.name()))
            }
        };
        match *self {
            InitPolicy::Default => Ok(()),
            InitPolicy::Standard { forget_bias } => {
                if !forget_bias.is_finite() {
                    return config("forget bias must be finite");
                }
                needs(arch == Arch::Lstm, "lstm")
            }
            InitPolicy::Chrono { t_max, .. } => {
                check_chrono(t_max)?;
                needs(arch == Arch::Lstm, "lstm")
            }
            InitPolicy::GateRange { t_min, t_max } => {
                check_gate_range(t_min, t_max)?;
                needs(arch == Arch::Gated, "gated")
            }
            InitPolicy::HeavyTail { t_cap } => {
                check_t_cap(t_cap)?;
                needs(matches!(arch, Arch::Lstm | Arch::Gated), "lstm or gated")
            }
        }
    }

    pub fn apply(&self, cell: &mut CellParams, rng: &mut Rng) -> Result<()> {
        self.validate_for(cell.arch())?;
        match *self {
            InitPolicy::Default => {
                if cell.arch() == Arch::Lstm {
                    standard_init(cell, 1.0)?;
                }
                Ok(())
            }
            InitPolicy::Standard { forget_bias } => standard_init(cell, forget_bias),
            InitPolicy::Chrono { t_max, integer } => chrono_init_with(cell, t_max, integer, rng),
            InitPolicy::GateRange { t_min, t_max } => gate_range_init(cell, t_min, t_max, rng),
            InitPolicy::HeavyTail { t_cap } => heavy_tail_init(cell, t_cap, rng),
        }
    }
}

impl fmt::Display for InitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitPolicy::Default => write!(f, "default"),
            InitPolicy::Standard { forget_bias } => write!(f, "standard(b_f={forget_bias})"),
            InitPolicy::Chrono { t_max, integer } => {
                write!(f, "chrono(T_max={t_max}{})", if *integer { ", integer" } else { "" })
            }
            InitPolicy::GateRange { t_min, t_max } => {
                write!(f, "gate-range(T_min={t_min}, T_max={t_max})")
            }
            InitPolicy::HeavyTail { t_cap } => write!(f, "heavy-tail(T_cap={t_cap})"),
        }
    }
}

fn check_chrono(t_max: f64) -> Result<()> {
    if !(t_max >= 2.0) || !t_max.is_finite() {
        return config(format!("chrono initialization needs T_max >= 2, got {t_max}"));
    }
    Ok(())
}

fn check_gate_range(t_min: f64, t_max: f64) -> Result<()> {
    if !(t_min >= 1.0 + GATE_RANGE_EPS) || !(t_max >= t_min) || !t_max.is_finite() {
        return config(format!(
            "gate-range initialization needs 1 < T_min <= T_max, got [{t_min}, {t_max}]"
        ));
    }
    Ok(())
}

fn check_t_cap(t_cap: usize) -> Result<()> {
    if t_cap < 2 {
        return config(format!("heavy-tail initialization needs T_cap >= 2, got {t_cap}"));
    }
    Ok(())
}

fn require(cell: &CellParams, arch: Arch, what: &str) -> Result<()> {
    if cell.arch() != arch {
        return config(format!("{what} needs {arch} parameters, got {}", cell.arch()));
    }
    Ok(())
}

/// Forget bias `forget_bias`, all other LSTM biases zero.
pub fn standard_init(cell: &mut CellParams, forget_bias: f64) -> Result<()> {
    require(cell, Arch::Lstm, "standard initialization")?;
    if !forget_bias.is_finite() {
        return config("forget bias must be finite");
    }
    cell.b.fill(0.0);
    cell.bias_mut(Gate::Forget)?.fill(forget_bias);
    Ok(())
}

/// Chrono initialization with `u` drawn from the real interval `[1, T_max - 1]`.
pub fn chrono_init(cell: &mut CellParams, t_max: f64, rng: &mut Rng) -> Result<()> {
    chrono_init_with(cell, t_max, false, rng)
}

/// Chrono initialization; `integer` draws `u` from `{1, ..., floor(T_max - 1)}`.
pub fn chrono_init_with(
    cell: &mut CellParams,
    t_max: f64,
    integer: bool,
    rng: &mut Rng,
) -> Result<()> {
    require(cell, Arch::Lstm, "chrono initialization")?;
    check_chrono(t_max)?;
    let n = cell.n_hidden();
    let mut forget = Vec::with_capacity(n);
    for _ in 0..n {
        let u = if integer {
            rng.between(1, (t_max - 1.0).floor() as usize) as f64
        } else {
            rng.uniform(1.0, t_max - 1.0)?
        };
        forget.push(u.ln());
    }
    cell.b.fill(0.0);
    cell.bias_mut(Gate::Forget)?.copy_from_slice(&forget);
    for (bi, bf) in cell.bias_mut(Gate::Input)?.iter_mut().zip(&forget) {
        *bi = -bf;
    }
    Ok(())
}

/// Gated-RNN gate biases `-log(u - 1)`, `u ~ U([T_min, T_max])`. Candidate
/// biases are left as they are.
pub fn gate_range_init(cell: &mut CellParams, t_min: f64, t_max: f64, rng: &mut Rng) -> Result<()> {
    require(cell, Arch::Gated, "gate-range initialization")?;
    check_gate_range(t_min, t_max)?;
    let mut biases = Vec::with_capacity(cell.n_hidden());
    for _ in 0..cell.n_hidden() {
        let u = rng.uniform(t_min, t_max)?;
        biases.push(-(u - 1.0).ln());
    }
    cell.bias_mut(Gate::Update)?.copy_from_slice(&biases);
    Ok(())
}

/// Inverse-CDF sampler for `P(k) ∝ 1/(k log(k+1)^2)` on `{1, ..., t_cap}`.
#[derive(Clone, Debug)]
pub struct HeavyTail {
    cdf: Vec<f64>,
}

impl HeavyTail {
    pub fn new(t_cap: usize) -> Result<Self> {
        check_t_cap(t_cap)?;
        let mut cdf = Vec::with_capacity(t_cap);
        let mut acc = 0.0;
        for k in 1..=t_cap {
            acc += Self::weight(k);
            cdf.push(acc);
        }
        for v in &mut cdf {
            *v /= acc;
        }
        Ok(Self { cdf })
    }

    /// Unnormalized weight of `k`.
    pub fn weight(k: usize) -> f64 {
        let k = k as f64;
        1.0 / (k * (k + 1.0).ln().powi(2))
    }

    pub fn t_cap(&self) -> usize {
        self.cdf.len()
    }

    /// Normalized probability of `k`.
    pub fn probability(&self, k: usize) -> f64 {
        match k {
            0 => 0.0,
            1 => self.cdf[0],
            k if k <= self.cdf.len() => self.cdf[k - 1] - self.cdf[k - 2],
            _ => 0.0,
        }
    }

    /// Smallest `k` whose cumulative probability exceeds `u`.
    pub fn quantile(&self, u: f64) -> usize {
        (self.cdf.partition_point(|&c| c <= u) + 1).min(self.cdf.len())
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        self.quantile(rng.unit())
    }
}

/// One draw from the heavy-tailed time-range distribution truncated at `t_cap`.
pub fn heavy_tail_t(rng: &mut Rng, t_cap: usize) -> Result<usize> {
    Ok(HeavyTail::new(t_cap)?.sample(rng))
}

/// Per-unit time range `k` from [`HeavyTail`]. LSTM: `b_f = log k`,
/// `b_i = -log k`, other biases zero. Gated RNN: `b_g = -log k`, i.e. a
/// gate value of `1/(k+1)`.
pub fn heavy_tail_init(cell: &mut CellParams, t_cap: usize, rng: &mut Rng) -> Result<()> {
    let sampler = HeavyTail::new(t_cap)?;
    let logs: Vec<f64> = (0..cell.n_hidden())
        .map(|_| (sampler.sample(rng) as f64).ln())
        .collect();
    match cell.arch() {
        Arch::Lstm => {
            cell.b.fill(0.0);
            cell.bias_mut(Gate::Forget)?.copy_from_slice(&logs);
            for (bi, l) in cell.bias_mut(Gate::Input)?.iter_mut().zip(&logs) {
                *bi = -l;
            }
        }
        Arch::Gated => {
            for (bg, l) in cell.bias_mut(Gate::Update)?.iter_mut().zip(&logs) {
                *bg = -l;
            }
        }
        other => return config(format!("heavy-tail initialization has no gate to set on {other}")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sigmoid_scalar;

    fn lstm(rng: &mut Rng) -> CellParams {
        CellParams::random(Arch::Lstm, 3, 16, rng).unwrap()
    }

    #[test]
    fn chrono_examples() {
        let mut rng = Rng::new(1);
        let mut p = lstm(&mut rng);
        chrono_init(&mut p, 2.0, &mut rng).unwrap();
        assert!(p.b.iter().all(|&b| b == 0.0));

        let mut p = lstm(&mut rng);
        let (wx, wh) = (p.wx.clone(), p.wh.clone());
        chrono_init(&mut p, 1001.0, &mut rng).unwrap();
        let bf = p.bias(Gate::Forget).unwrap().to_vec();
        let bi = p.bias(Gate::Input).unwrap();
        for (f, i) in bf.iter().zip(bi) {
            assert_eq!(*i, -*f);
            assert_eq!(f + i, 0.0);
            assert!((0.0..=6.907755).contains(f));
        }
        assert!(p.bias(Gate::Candidate).unwrap().iter().all(|&b| b == 0.0));
        assert!(p.bias(Gate::Output).unwrap().iter().all(|&b| b == 0.0));
        assert_eq!((wx, wh), (p.wx, p.wh));

        let mut p = lstm(&mut rng);
        assert!(chrono_init(&mut p, 1.5, &mut rng).is_err());
        let mut g = CellParams::zeros(Arch::Gated, 2, 2);
        assert!(chrono_init(&mut g, 10.0, &mut rng).is_err());
    }

    #[test]
    fn chrono_integer_mode_uses_logs_of_integers() {
        let mut rng = Rng::new(2);
        let mut p = lstm(&mut rng);
        chrono_init_with(&mut p, 6.0, true, &mut rng).unwrap();
        for &f in p.bias(Gate::Forget).unwrap() {
            let u = f.exp().round();
            assert!((1.0..=5.0).contains(&u));
            assert!((f - u.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn chrono_gates_are_complementary_with_zero_weights() {
        let mut rng = Rng::new(3);
        let mut p = CellParams::zeros(Arch::Lstm, 2, 8);
        chrono_init(&mut p, 50.0, &mut rng).unwrap();
        let i: Vec<f64> = p.bias(Gate::Input).unwrap().iter().map(|&b| sigmoid_scalar(b)).collect();
        let f: Vec<f64> = p.bias(Gate::Forget).unwrap().iter().map(|&b| sigmoid_scalar(b)).collect();
        for (a, b) in i.iter().zip(&f) {
            assert!((a - (1.0 - b)).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_range_examples() {
        let mut rng = Rng::new(4);
        let mut p = CellParams::random(Arch::Gated, 2, 12, &mut rng).unwrap();
        gate_range_init(&mut p, 2.0, 2.0, &mut rng).unwrap();
        for &b in p.bias(Gate::Update).unwrap() {
            assert_eq!(b, 0.0);
            assert_eq!(sigmoid_scalar(b), 0.5);
        }

        for t in [3.0, 7.5, 100.0] {
            gate_range_init(&mut p, t, t, &mut rng).unwrap();
            for &b in p.bias(Gate::Update).unwrap() {
                assert!((sigmoid_scalar(b) - 1.0 / t).abs() < 1e-15);
            }
        }

        let wx = p.wx.clone();
        gate_range_init(&mut p, 5.0, 40.0, &mut rng).unwrap();
        for &b in p.bias(Gate::Update).unwrap() {
            let g = sigmoid_scalar(b);
            assert!((1.0 / 40.0 - 1e-12..=1.0 / 5.0 + 1e-12).contains(&g));
        }
        assert_eq!(wx, p.wx);

        assert!(gate_range_init(&mut p, 1.0, 5.0, &mut rng).is_err());
        assert!(gate_range_init(&mut p, 4.0, 3.0, &mut rng).is_err());
    }

    #[test]
    fn standard_examples() {
        let mut rng = Rng::new(5);
        let mut p = lstm(&mut rng);
        standard_init(&mut p, 1.0).unwrap();
        for &b in p.bias(Gate::Forget).unwrap() {
            assert!((sigmoid_scalar(b) - 0.731059).abs() < 1e-6);
        }
        assert!(p.bias(Gate::Input).unwrap().iter().all(|&b| b == 0.0));

        standard_init(&mut p, 0.0).unwrap();
        assert!(p.b.iter().all(|&b| b == 0.0));

        standard_init(&mut p, 2.0).unwrap();
        assert!(p.bias(Gate::Forget).unwrap().iter().all(|&b| b == 2.0));
    }

    #[test]
    fn heavy_tail_two_point_ratio() {
        let h = HeavyTail::new(2).unwrap();
        let ratio = h.probability(1) / h.probability(2);
        let expected = 2.0 * 3f64.ln().powi(2) / 2f64.ln().powi(2);
        assert!((ratio - expected).abs() < 1e-12);
        assert!((ratio - 5.025).abs() < 2e-3);
        assert!(HeavyTail::new(1).is_err());
    }

    #[test]
    fn heavy_tail_quantiles_follow_the_table() {
        let h = HeavyTail::new(1000).unwrap();
        assert_eq!(h.quantile(0.0), 1);
        assert_eq!(h.quantile(h.probability(1) - 1e-12), 1);
        assert_eq!(h.quantile(h.probability(1) + 1e-12), 2);
        assert_eq!(h.quantile(0.999_999_999_999), 1000);
        let mut rng = Rng::new(6);
        for _ in 0..10_000 {
            let k = heavy_tail_t(&mut rng, 50).unwrap();
            assert!((1..=50).contains(&k));
        }
    }

    #[test]
    fn heavy_tail_frequencies() {
        let h = HeavyTail::new(DEFAULT_T_CAP).unwrap();
        // exact normalization by direct summation
        let total: f64 = (1..=DEFAULT_T_CAP).map(HeavyTail::weight).sum();
        let n = 1_000_000;
        let mut counts = [0usize; 11];
        let mut rng = Rng::new(7);
        for _ in 0..n {
            let k = h.sample(&mut rng);
            if k <= 10 {
                counts[k] += 1;
            }
        }
        for k in 1..=10 {
            let p = HeavyTail::weight(k) / total;
            assert!((h.probability(k) - p).abs() < 1e-12);
            let freq = counts[k] as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            let tol = (0.01 * p).max(4.0 * sigma);
            assert!((freq - p).abs() <= tol, "k={k}: {freq} vs {p}");
        }
    }

    #[test]
    fn heavy_tail_init_sets_log_ranges() {
        let mut rng = Rng::new(8);
        let mut p = lstm(&mut rng);
        heavy_tail_init(&mut p, 100, &mut rng).unwrap();
        for (&f, &i) in p.bias(Gate::Forget).unwrap().iter().zip(p.bias(Gate::Input).unwrap()) {
            assert_eq!(i, -f);
            let k = f.exp().round();
            assert!((1.0..=100.0).contains(&k) && (f - k.ln()).abs() < 1e-12);
        }
        let mut g = CellParams::zeros(Arch::Gated, 2, 5);
        heavy_tail_init(&mut g, 100, &mut rng).unwrap();
        assert!(g.bias(Gate::Update).unwrap().iter().all(|&b| b <= 0.0));
        let mut r = CellParams::zeros(Arch::Rnn, 2, 5);
        assert!(heavy_tail_init(&mut r, 100, &mut rng).is_err());
    }

    #[test]
    fn init_is_reproducible() {
        for policy in [
            InitPolicy::Chrono { t_max: 30.0, integer: false },
            InitPolicy::HeavyTail { t_cap: 1000 },
        ] {
            let base = lstm(&mut Rng::new(9));
            let mut a = base.clone();
            let mut b = base.clone();
            policy.apply(&mut a, &mut Rng::new(10)).unwrap();
            policy.apply(&mut b, &mut Rng::new(10)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn policy_architecture_combinations() {
        let chrono = InitPolicy::Chrono { t_max: 10.0, integer: false };
        assert!(chrono.validate_for(Arch::Lstm).is_ok());
        assert!(chrono.validate_for(Arch::Rnn).is_err());
        let range = InitPolicy::GateRange { t_min: 2.0, t_max: 4.0 };
        assert!(range.validate_for(Arch::Gated).is_ok());
        assert!(range.validate_for(Arch::Leaky).is_err());
        assert!(InitPolicy::Default.validate_for(Arch::Leaky).is_ok());
        assert!(InitPolicy::Standard { forget_bias: 1.0 }.validate_for(Arch::Gated).is_err());
    }
}
