//! RMSprop and the plateau learning-rate schedule.

use crate::cells::ParamSet;
use crate::error::{config, Error, Result};

pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_RHO: f64 = 0.9;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Plain (uncentered) RMSprop:
/// `s <- rho s + (1 - rho) g^2`, `theta <- theta - lr g / sqrt(s + eps)`.
///
/// No clipping. A non-finite gradient entry aborts the step before any
/// parameter is touched.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    lr: f64,
    rho: f64,
    eps: f64,
    /// Moving averages of squared gradients, one buffer per parameter block.
    mean_square: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(lr: f64, rho: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return config(format!("learning rate must be positive, got {lr}"));
        }
        if !(0.0..1.0).contains(&rho) {
            return config(format!("rho must lie in [0, 1), got {rho}"));
        }
        if !(eps > 0.0) || !eps.is_finite() {
            return config(format!("eps must be positive, got {eps}"));
        }
        Ok(Self {
            lr,
            rho,
            eps,
            mean_square: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn mean_square(&self) -> &[Vec<f64>] {
        &self.mean_square
    }

    pub(crate) fn halve_lr(&mut self) {
        self.lr /= 2.0;
    }

    /// Applies one update. `iteration` is only used for error reports.
    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P, iteration: usize) -> Result<()> {
        let grads = grads.blocks();
        for (name, g) in &grads {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    iteration,
                    detail: format!("gradient {name}[{i}] is {}", g[i]),
                });
            }
        }
        let mut blocks = params.blocks_mut();
        if blocks.len() != grads.len()
            || blocks.iter().zip(&grads).any(|((_, p), (_, g))| p.len() != g.len())
        {
            return config("parameter and gradient shapes differ");
        }
        if self.mean_square.is_empty() {
            self.mean_square = grads.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
        } else if self
            .mean_square
            .iter()
            .zip(&grads)
            .any(|(s, (_, g))| s.len() != g.len())
            || self.mean_square.len() != grads.len()
        {
            return config("optimizer state was built for different parameters");
        }
        for (((_, theta), (_, g)), s) in blocks.iter_mut().zip(&grads).zip(&mut self.mean_square) {
            for ((p, &gi), si) in theta.iter_mut().zip(g.iter()).zip(s.iter_mut()) {
                *si = self.rho * *si + (1.0 - self.rho) * gi * gi;
                *p -= self.lr * gi / (*si + self.eps).sqrt();
            }
        }
        Ok(())
    }
}

/// Halves the learning rate when the evaluation loss has not improved for
/// `patience` consecutive evaluations.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    patience: usize,
    best: f64,
    since_best: usize,
}

impl LrSchedule {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return config("patience must be at least 1");
        }
        Ok(Self {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        })
    }

    pub fn patience(&self) -> usize {
        self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn since_best(&self) -> usize {
        self.since_best
    }

    /// Feeds one evaluation loss; returns whether the rate was halved.
    pub fn update(&mut self, eval_loss: f64, opt: &mut RmsProp) -> bool {
        if eval_loss < self.best {
            self.best = eval_loss;
            self.since_best = 0;
            return false;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            opt.halve_lr();
            self.since_best = 0;
            return true;
        }
        false
    }
}
