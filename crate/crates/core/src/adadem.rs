//! Adaptive decoupled entropy minimization.
//!
//! Per sample, with `p = softmax(z)` and pseudo-label `k = argmax p`:
//!
//! ```text
//! loss(z) = −(1/δ) Σ_i (p_i − c_i) z_i
//! ```
//!
//! `δ` is a norm of the CADF reward of that sample and `c` the
//! marginal-entropy-calibrator row `p̄_k`: an exponential moving average of
//! the mean prediction over samples routed to class `k`. Both `δ` and `c` are
//! constants with respect to differentiation.
//!
//! The calibrator state is updated from the batch *before* the loss is
//! evaluated on it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::losses::{self, dot, Direction, Logits, LossEval};
use crate::numkit::{argmax, exact_sum, Matrix};
use crate::{Error, Result};

/// Below this the reward norm is reported as degenerate.
pub const DELTA_DEGENERATE: f64 = 1e-12;
/// Floor applied to `δ` before dividing.
pub const DELTA_FLOOR: f64 = 1e-8;
/// Default EMA momentum `π`: `p̄ ← (1 − π) p̄ + π · mean`.
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    L1,
    L2,
    Linf,
}

impl NormKind {
    pub fn apply(self, v: &[f64]) -> f64 {
        match self {
            NormKind::L1 => exact_sum(v.iter().map(|x| x.abs())),
            NormKind::L2 => libm::sqrt(exact_sum(v.iter().map(|x| x * x))),
            NormKind::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

/// Which reward vector `δ` is the norm of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaSource {
    /// Reward of the CADF term alone.
    #[default]
    Cadf,
    /// Reward of the whole conditional entropy (the `δ_v` ablation).
    FullEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaDemKind {
    /// Normalization and calibrator.
    #[default]
    Full,
    /// Calibrator replaced by the constant copy of `p`: rescaled classical EM.
    NormOnly,
    /// `δ` fixed to 1.
    MecOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaDemVariant {
    pub kind: AdaDemKind,
    /// Scale applied to the calibrator row; ignored by `NormOnly`.
    pub mec_alpha: f64,
    pub delta_source: DeltaSource,
    pub norm: NormKind,
}

impl Default for AdaDemVariant {
    fn default() -> Self {
        AdaDemVariant {
            kind: AdaDemKind::Full,
            mec_alpha: 1.0,
            delta_source: DeltaSource::Cadf,
            norm: NormKind::L1,
        }
    }
}

impl AdaDemVariant {
    pub fn of_kind(kind: AdaDemKind) -> Self {
        AdaDemVariant {
            kind,
            ..Default::default()
        }
    }
}

/// Reward norm `δ` of one sample.
///
/// Returns [`Error::DegenerateDelta`] when the norm is below
/// [`DELTA_DEGENERATE`] (only reachable for the full-entropy source at
/// uniform logits); callers clamp to [`DELTA_FLOOR`].
pub fn delta(z: &Logits, norm: NormKind, source: DeltaSource) -> Result<f64> {
    let d = match source {
        DeltaSource::Cadf => {
            let (scaled, total) = losses::cadf_reward_unnormalized(z);
            norm.apply(&scaled) / total
        }
        DeltaSource::FullEntropy => norm.apply(&losses::em_eval(z, Direction::Minimize).reward()),
    };
    if d < DELTA_DEGENERATE {
        Err(Error::DegenerateDelta(d))
    } else {
        Ok(d)
    }
}

/// Argmax with ties broken towards the lowest index.
pub fn pseudo_label(p: &[f64]) -> usize {
    argmax(p)
}

/// Calibrator table: row `k` is the running mean prediction of samples
/// pseudo-labelled `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MecRecord")]
pub struct MecState {
    classes: usize,
    momentum: f64,
    steps: u64,
    table: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MecRecord {
    classes: usize,
    momentum: f64,
    steps: u64,
    table: Vec<f64>,
}

impl TryFrom<MecRecord> for MecState {
    type Error = Error;

    fn try_from(r: MecRecord) -> Result<Self> {
        MecState::from_parts(r.classes, r.momentum, r.steps, r.table)
    }
}

impl MecState {
    /// Uniform rows and the default momentum.
    pub fn new(classes: usize) -> Result<Self> {
        Self::with_momentum(classes, DEFAULT_MOMENTUM)
    }

    pub fn with_momentum(classes: usize, momentum: f64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::domain(format!("need at least 2 classes, got {classes}")));
        }
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::domain(format!("momentum must lie in (0, 1], got {momentum}")));
        }
        Ok(MecState {
            classes,
            momentum,
            steps: 0,
            table: vec![1.0 / classes as f64; classes * classes],
        })
    }

    /// Rebuilds from serialized parts, checking the table shape and rows.
    pub fn from_parts(classes: usize, momentum: f64, steps: u64, table: Vec<f64>) -> Result<Self> {
        let mut s = Self::with_momentum(classes, momentum)?;
        if table.len() != classes * classes {
            return Err(Error::Dimension {
                expected: classes * classes,
                got: table.len(),
            });
        }
        s.table = table;
        s.steps = steps;
        for k in 0..classes {
            let sum: f64 = s.row(k).iter().sum();
            if s.row(k).iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::domain(format!("calibrator row {k} is not on the simplex")));
            }
        }
        Ok(s)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.table[k * self.classes..(k + 1) * self.classes]
    }

    pub fn table(&self) -> Matrix {
        Matrix::from_vec(self.classes, self.classes, self.table.clone()).expect("square table")
    }

    /// Back to uniform rows and zero steps.
    pub fn reset(&mut self) {
        self.table.fill(1.0 / self.classes as f64);
        self.steps = 0;
    }

    /// One EMA step. For every class `k` present among `labels`,
    /// `row_k ← (1 − π) row_k + π · mean(probs with label k)`; rows of absent
    /// classes are left alone.
    pub fn update<P: AsRef<[f64]>>(&mut self, probs: &[P], labels: &[usize]) -> Result<()> {
        if probs.len() != labels.len() {
            return Err(Error::Dimension {
                expected: probs.len(),
                got: labels.len(),
            });
        }
        let c = self.classes;
        let mut sums = vec![0.0; c * c];
        let mut counts = vec![0usize; c];
        for (p, &k) in probs.iter().zip(labels) {
            let p = p.as_ref();
            if k >= c {
                return Err(Error::domain(format!("label {k} out of range for {c} classes")));
            }
            if p.len() != c {
                return Err(Error::Dimension {
                    expected: c,
                    got: p.len(),
                });
            }
            counts[k] += 1;
            for (s, &v) in sums[k * c..(k + 1) * c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let pi = self.momentum;
        for k in 0..c {
            if counts[k] == 0 {
                continue;
            }
            let n = counts[k] as f64;
            let row = &mut self.table[k * c..(k + 1) * c];
            for (r, s) in row.iter_mut().zip(&sums[k * c..(k + 1) * c]) {
                *r = (1.0 - pi) * *r + pi * (s / n);
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// Loss and gradient for one sample given its frozen calibrator row `c` and
/// normalizer `delta`.
pub fn adadem_sample(z: &[f64], p: &[f64], c: &[f64], delta: f64) -> LossEval {
    let s = dot(p, z);
    let inv = 1.0 / delta;
    let value = -inv * p.iter().zip(c).zip(z).map(|((pi, ci), zi)| (pi - ci) * zi).sum::<f64>();
    let grad = p
        .iter()
        .zip(c)
        .zip(z)
        .map(|((&pi, &ci), &zi)| -inv * (pi * (zi + 1.0 - s) - ci))
        .collect();
    LossEval { value, grad }
}

/// AdaDEM over a batch. Updates `state` with the batch's predictions first,
/// then evaluates every sample against the updated rows.
pub fn adadem_eval(
    batch: &[Logits],
    state: &mut MecState,
    variant: &AdaDemVariant,
    direction: Direction,
) -> Result<Vec<LossEval>> {
    let c = state.classes();
    if let Some(bad) = batch.iter().find(|z| z.classes() != c) {
        return Err(Error::Dimension {
            expected: c,
            got: bad.classes(),
        });
    }
    let probs: Vec<Vec<f64>> = batch.iter().map(Logits::probs).collect();
    let labels: Vec<usize> = probs.iter().map(|p| pseudo_label(p)).collect();
    state.update(&probs, &labels)?;

    let sign = direction.sign();
    batch
        .iter()
        .zip(&probs)
        .zip(&labels)
        .map(|((z, p), &k)| {
            let calib: Vec<f64> = match variant.kind {
                AdaDemKind::NormOnly => p.clone(),
                _ => state.row(k).iter().map(|v| variant.mec_alpha * v).collect(),
            };
            let d = match variant.kind {
                AdaDemKind::MecOnly => 1.0,
                _ => match delta(z, variant.norm, variant.delta_source) {
                    Ok(d) => d,
                    Err(Error::DegenerateDelta(d)) => d,
                    Err(e) => return Err(e),
                }
                .max(DELTA_FLOOR),
            };
            let mut eval = adadem_sample(z, p, &calib, d);
            eval.value *= sign;
            eval.grad.iter_mut().for_each(|g| *g *= sign);
            Ok(eval)
        })
        .collect()
}
