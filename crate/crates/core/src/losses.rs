//! Classical entropy minimization and its decoupled parts.
//!
//! With `p = softmax(z)` the conditional entropy splits as `H = T + Q` where
//! `T(z) = −Σ p_i z_i` (the cluster-aggregation driving factor, CADF) and
//! `Q(z) = log Σ e^{z_i}` (the gradient-mitigation calibrator, GMC). DEM
//! tempers `T` with `τ` and scales `Q` with `α`:
//!
//! ```text
//! H_dem(z) = −Σ softmax(z/τ)_i z_i + α · log Σ e^{z_i}
//! ```
//!
//! A *reward* is the negated partial derivative of a loss with respect to a
//! logit. All gradients here are analytic and returned with the value in a
//! [`LossEval`].

use alloc::format;
use alloc::vec::Vec;
use core::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::numkit::{self, argmax};
use crate::{Error, Result};

/// Slack on the `τ <= 2/α` comparison so grid points landing exactly on the
/// bound (e.g. `τ = 2.0, α = 1.0`) are accepted.
pub const VALIDITY_TOL: f64 = 1e-12;

/// Per-sample logit vector with at least two finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.len() < 2 {
            return Err(Error::domain(format!(
                "logits need at least 2 classes, got {}",
                z.len()
            )));
        }
        numkit::check_finite(&z)?;
        Ok(Logits(z))
    }

    pub fn from_slice(z: &[f64]) -> Result<Self> {
        Self::new(z.to_vec())
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax_unchecked(&self.0)
    }
}

impl Deref for Logits {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Logits {
    type Error = Error;

    fn try_from(z: Vec<f64>) -> Result<Self> {
        Logits::new(z)
    }
}

impl From<Logits> for Vec<f64> {
    fn from(z: Logits) -> Vec<f64> {
        z.0
    }
}

// Logits are validated non-empty and finite, so the kernel cannot fail.
fn softmax_unchecked(z: &[f64]) -> Vec<f64> {
    numkit::softmax(z).expect("validated logits")
}

fn lse_unchecked(z: &[f64]) -> f64 {
    numkit::logsumexp(z).expect("validated logits")
}

/// Loss value and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEval {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossEval {
    /// Negated gradient.
    pub fn reward(&self) -> Vec<f64> {
        self.grad.iter().map(|g| -g).collect()
    }

    fn oriented(mut self, direction: Direction) -> Self {
        if direction == Direction::Maximize {
            self.value = -self.value;
            for g in &mut self.grad {
                *g = -*g;
            }
        }
        self
    }
}

/// Whether the entropy-family objective is minimized (self-training) or
/// maximized (exploration bonus). Maximization negates value and gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Minimize,
    Maximize,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Minimize => 1.0,
            Direction::Maximize => -1.0,
        }
    }
}

/// DEM hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemConfig {
    pub tau: f64,
    pub alpha: f64,
    #[serde(default)]
    pub direction: Direction,
}

impl DemConfig {
    /// Checked constructor; `alpha = 0` skips the `τ <= 2/α` bound.
    pub fn new(tau: f64, alpha: f64, direction: Direction) -> Result<Self> {
        let cfg = DemConfig {
            tau,
            alpha,
            direction,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The classical-EM point `τ = 1, α = 1`.
    pub fn classical() -> Self {
        DemConfig {
            tau: 1.0,
            alpha: 1.0,
            direction: Direction::Minimize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::domain(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if validate_config(self.tau, self.alpha) {
            Ok(())
        } else {
            Err(Error::InvalidConfig {
                tau: self.tau,
                alpha: self.alpha,
                bound: 2.0 / self.alpha,
            })
        }
    }
}

/// `H(z) = −Σ p_i log p_i`, evaluated from log-probabilities.
pub fn conditional_entropy(z: &Logits) -> f64 {
    let lse = lse_unchecked(z);
    -z.iter()
        .map(|&x| {
            let lp = x - lse;
            libm::exp(lp) * lp
        })
        .sum::<f64>()
}

/// `T(z) = −Σ softmax(z)_i z_i`.
pub fn cadf(z: &Logits) -> f64 {
    let p = softmax_unchecked(z);
    -dot(&p, z)
}

/// `Q(z) = log Σ e^{z_i}`.
pub fn gmc(z: &Logits) -> f64 {
    lse_unchecked(z)
}

/// `R_T,i = −∂T/∂z_i = p_i (T + z_i + 1)`.
pub fn cadf_reward(z: &Logits) -> Vec<f64> {
    let (scaled, total) = cadf_reward_unnormalized(z);
    scaled.into_iter().map(|r| r / total).collect()
}

/// `R_T` times the softmax normalizer `Σ_j exp(z_j − max z)`, and that
/// normalizer. Norms of `R_T` can divide once at the end, which keeps the
/// uniform case exact.
pub(crate) fn cadf_reward_unnormalized(z: &Logits) -> (Vec<f64>, f64) {
    // T + z_i is shift invariant
    let top = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let shifted: Vec<f64> = z.iter().map(|&v| v - top).collect();
    let e: Vec<f64> = shifted.iter().map(|&v| libm::exp(v)).collect();
    let total: f64 = e.iter().sum();
    let t = -dot(&e, &shifted) / total;
    let scaled = e.iter().zip(&shifted).map(|(&ei, &zi)| ei * (t + zi + 1.0)).collect();
    (scaled, total)
}

/// `R_Q,i = −∂Q/∂z_i = −p_i`.
pub fn gmc_reward(z: &Logits) -> Vec<f64> {
    softmax_unchecked(z).into_iter().map(|p| -p).collect()
}

/// Conditional entropy with `∂H/∂z_i = −p_i (T + z_i)`.
pub fn em_eval(z: &Logits, direction: Direction) -> LossEval {
    let p = softmax_unchecked(z);
    let t = -dot(&p, z);
    let grad = p.iter().zip(z.iter()).map(|(&pi, &zi)| -pi * (t + zi)).collect();
    LossEval {
        value: conditional_entropy(z),
        grad,
    }
    .oriented(direction)
}

/// Detached surrogate `−Σ (p_i − p̂_i) z_i` where `p̂` is a constant copy of
/// `p`. The value is identically zero at the evaluation point; only the
/// gradient matches [`em_eval`].
pub fn detached_em_eval(z: &Logits) -> LossEval {
    let p = softmax_unchecked(z);
    let s = dot(&p, z);
    // d/dz_i of −Σ p_j z_j with p̂ frozen: −p_i (z_i + 1 − S), plus p̂_i.
    let grad = p
        .iter()
        .zip(z.iter())
        .map(|(&pi, &zi)| -(pi * (zi + 1.0 - s) - pi))
        .collect();
    // p − p̂ vanishes at the evaluation point
    LossEval { value: 0.0, grad }
}

fn tempered_parts(z: &[f64], tau: f64) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    let pt = numkit::tempered_softmax(z, tau)?;
    let t = -dot(&pt, z);
    let grad = pt
        .iter()
        .zip(z)
        .map(|(&p, &zi)| -(p / tau) * (t + zi + tau))
        .collect();
    Ok((pt, t, grad))
}

/// Tempered CADF `T_τ(z) = −Σ p_τi z_i` with
/// `∂T_τ/∂z_i = −(1/τ) p_τi (T_τ + z_i + τ)`.
pub fn cadf_tempered_eval(z: &Logits, tau: f64) -> Result<LossEval> {
    let (_, value, grad) = tempered_parts(z, tau)?;
    Ok(LossEval { value, grad })
}

/// DEM loss `T_τ(z) + α Q(z)`.
pub fn dem_eval(z: &Logits, cfg: &DemConfig) -> Result<LossEval> {
    cfg.validate()?;
    let (_, t, mut grad) = tempered_parts(z, cfg.tau)?;
    let mut value = t;
    if cfg.alpha != 0.0 {
        let p = softmax_unchecked(z);
        for (g, pi) in grad.iter_mut().zip(&p) {
            *g += cfg.alpha * pi;
        }
        value += cfg.alpha * lse_unchecked(z);
    }
    Ok(LossEval { value, grad }.oriented(cfg.direction))
}

/// `0 < τ` and, for `α > 0`, `τ <= 2/α` (with [`VALIDITY_TOL`] slack).
pub fn validate_config(tau: f64, alpha: f64) -> bool {
    if !(tau > 0.0) || !tau.is_finite() {
        return false;
    }
    alpha == 0.0 || (alpha > 0.0 && tau <= 2.0 / alpha + VALIDITY_TOL)
}

/// `∂²H_dem/∂z_i²` at uniform logits: `(1 − 1/C)(α/C − 2/(τC))`.
pub fn boundary_second_derivative(tau: f64, alpha: f64, classes: usize) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::domain(format!("tau must be positive, got {tau}")));
    }
    if classes < 2 {
        return Err(Error::domain(format!("need at least 2 classes, got {classes}")));
    }
    let c = classes as f64;
    Ok((1.0 - 1.0 / c) * (alpha / c - 2.0 / (tau * c)))
}

/// One row of a reward curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardPoint {
    pub m: f64,
    pub p_max: f64,
    pub reward: f64,
}

/// Reward of the leading logit for `z = (m, 0, …, 0)` over `m_grid`.
pub fn reward_curve(classes: usize, cfg: &DemConfig, m_grid: &[f64]) -> Result<Vec<RewardPoint>> {
    if classes < 2 {
        return Err(Error::domain(format!("need at least 2 classes, got {classes}")));
    }
    cfg.validate()?;
    let mut z = alloc::vec![0.0; classes];
    m_grid
        .iter()
        .map(|&m| {
            z[0] = m;
            let logits = Logits::from_slice(&z)?;
            let eval = dem_eval(&logits, cfg)?;
            Ok(RewardPoint {
                m,
                p_max: softmax_unchecked(&z)[0],
                reward: -eval.grad[0],
            })
        })
        .collect()
}

/// Evenly spaced grid `lo, lo + step, …` up to and including `hi` (within
/// half a step); integer-indexed so values do not drift.
pub fn linspace_step(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(hi >= lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::domain(format!(
            "bad grid: lo = {lo}, hi = {hi}, step = {step}"
        )));
    }
    let n = libm::floor((hi - lo) / step + 1e-9) as usize;
    Ok((0..=n).map(|i| lo + i as f64 * step).collect())
}

/// Pseudo-label of a logit vector (argmax, ties to the lowest index).
pub fn predicted_class(z: &Logits) -> usize {
    argmax(z)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
