//! Exhaustive `(τ, α)` grid search and learning-rate sensitivity sweeps.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::losses::{validate_config, DemConfig, Direction};
use crate::{Error, Result};

/// Learning rates swept by default, smallest first.
pub const DEFAULT_LRS: [f64; 10] = [1e-4, 2.5e-4, 5e-4, 1e-3, 2.5e-3, 5e-3, 1e-2, 2.5e-2, 5e-2, 1e-1];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub tau_min: f64,
    pub tau_max: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub step: f64,
    /// Fraction of labelled target samples used for scoring.
    pub subset_fraction: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            tau_min: 0.0,
            tau_max: 2.0,
            alpha_min: 0.0,
            alpha_max: 2.0,
            step: 0.1,
            subset_fraction: 0.2,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [self.tau_min, self.tau_max, self.alpha_min, self.alpha_max, self.step];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("grid bounds must be finite"));
        }
        if !(self.step > 0.0) {
            return Err(Error::domain(format!("grid step must be positive, got {}", self.step)));
        }
        if self.tau_max < self.tau_min || self.alpha_max < self.alpha_min {
            return Err(Error::domain("grid maximum below minimum"));
        }
        if self.tau_min < 0.0 || self.alpha_min < 0.0 {
            return Err(Error::domain("grid bounds must be non-negative"));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::domain(format!(
                "subset fraction must lie in (0, 1], got {}",
                self.subset_fraction
            )));
        }
        Ok(())
    }

    /// Every raw grid point in τ-major order, flagged by validity.
    pub fn candidates(&self) -> Result<Vec<Candidate>> {
        self.validate()?;
        let taus = axis(self.tau_min, self.tau_max, self.step);
        let alphas = axis(self.alpha_min, self.alpha_max, self.step);
        let mut out = Vec::with_capacity(taus.len() * alphas.len());
        for &tau in &taus {
            for &alpha in &alphas {
                out.push(Candidate {
                    tau,
                    alpha,
                    valid: validate_config(tau, alpha),
                });
            }
        }
        Ok(out)
    }
}

fn axis(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    // integer indexing keeps 0.1-step grids free of accumulated drift
    let n = libm::floor((hi - lo) / step + 1e-9) as usize;
    (0..=n)
        .map(|i| {
            let v = lo + i as f64 * step;
            libm::round(v * 1e12) / 1e12
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tau: f64,
    pub alpha: f64,
    pub valid: bool,
}

impl Candidate {
    pub fn config(&self, direction: Direction) -> Result<DemConfig> {
        DemConfig::new(self.tau, self.alpha, direction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub tau: f64,
    pub alpha: f64,
    pub valid: bool,
    /// `None` for points that were never evaluated.
    pub accuracy: Option<f64>,
}

/// Highest accuracy; ties go to the point nearest `(1, 1)`, first by
/// `|τ − 1|` then by `|α − 1|`.
pub fn select_best(table: &[TrialResult]) -> Result<TrialResult> {
    let mut best: Option<TrialResult> = None;
    for t in table {
        let Some(acc) = t.accuracy else { continue };
        let better = match best {
            None => true,
            Some(b) => {
                let b_acc = b.accuracy.unwrap_or(f64::NEG_INFINITY);
                acc > b_acc
                    || (acc == b_acc
                        && ((t.tau - 1.0).abs(), (t.alpha - 1.0).abs()) < ((b.tau - 1.0).abs(), (b.alpha - 1.0).abs()))
            }
        };
        if better {
            best = Some(*t);
        }
    }
    best.ok_or(Error::EmptyGrid)
}

/// Scores every valid grid point with `score` (invalid points are never
/// passed to it) and returns the best point with the full table.
pub fn grid_search<F>(grid: &GridSpec, direction: Direction, mut score: F) -> Result<(TrialResult, Vec<TrialResult>)>
where
    F: FnMut(DemConfig) -> Result<f64>,
{
    let mut table = Vec::new();
    for c in grid.candidates()? {
        let accuracy = if c.valid {
            Some(score(c.config(direction)?)?)
        } else {
            None
        };
        table.push(TrialResult {
            tau: c.tau,
            alpha: c.alpha,
            valid: c.valid,
            accuracy,
        });
    }
    Ok((select_best(&table)?, table))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPoint {
    pub lr: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSweep {
    /// Accuracy with adaptation disabled.
    pub baseline: f64,
    pub points: Vec<LrPoint>,
}

impl LrSweep {
    /// Learning rates whose accuracy is at least the baseline.
    pub fn tolerance_count(&self) -> usize {
        self.points.iter().filter(|p| p.accuracy >= self.baseline).count()
    }

    pub fn best(&self) -> Option<LrPoint> {
        self.points
            .iter()
            .copied()
            .fold(None, |acc: Option<LrPoint>, p| match acc {
                Some(a) if a.accuracy >= p.accuracy => Some(a),
                _ => Some(p),
            })
    }
}

/// Runs `run(lr)` for each learning rate and once with `lr = 0` for the
/// baseline.
pub fn lr_sweep<F>(lrs: &[f64], mut run: F) -> Result<LrSweep>
where
    F: FnMut(f64) -> Result<f64>,
{
    check_lrs(lrs)?;
    let baseline = run(0.0)?;
    let points = lrs
        .iter()
        .map(|&lr| run(lr).map(|accuracy| LrPoint { lr, accuracy }))
        .collect::<Result<Vec<_>>>()?;
    Ok(LrSweep { baseline, points })
}

pub fn check_lrs(lrs: &[f64]) -> Result<()> {
    if lrs.is_empty() {
        return Err(Error::domain("learning-rate list is empty"));
    }
    if let Some(bad) = lrs.iter().find(|&&lr| !(lr > 0.0) || !lr.is_finite()) {
        return Err(Error::domain(format!("learning rates must be positive, got {bad}")));
    }
    Ok(())
}
