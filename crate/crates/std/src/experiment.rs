//! Resolved experiments: source model, protocol runs, grid search and lr
//! sweeps. Independent runs are spread over the rayon pool and gathered in
//! input order, so results do not depend on the thread count.

use std::path::PathBuf;

use rayon::prelude::*;

use demkit_core::bench::{self, MixtureSpec, ProtocolReport, SourceSpec, StreamSpec};
use demkit_core::losses::{DemConfig, Direction};
use demkit_core::model::{AdaptConfig, LossPlugin, Model, SgdConfig};
use demkit_core::numkit::{argmax, Rng};
use demkit_core::search::{self, GridSpec, LrPoint, LrSweep, TrialResult};
use demkit_core::Result;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

const SOURCE_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;
const SUBSET_STREAM: u64 = 3;

#[derive(Debug, Clone)]
pub struct Experiment {
    pub seed: u64,
    pub mixture: MixtureSpec,
    pub source: SourceSpec,
    pub source_path: Option<PathBuf>,
    pub stream: StreamSpec,
    pub sgd: SgdConfig,
    pub plugin: LossPlugin,
    pub direction: Direction,
    pub grid: GridSpec,
    pub lrs: Vec<f64>,
}

impl Experiment {
    /// Checks every section of `cfg`; nothing is computed yet.
    pub fn from_config(cfg: &ExperimentConfig) -> CliResult<Self> {
        let mixture = cfg.mixture_spec()?;
        let stream = cfg.stream_spec(&mixture)?;
        cfg.check_grid()?;
        cfg.check_lrs()?;
        Ok(Experiment {
            seed: cfg.seed,
            source: cfg.source_spec()?,
            source_path: cfg.source.load.clone(),
            sgd: cfg.sgd()?,
            plugin: cfg.loss.plugin(mixture.classes)?,
            direction: cfg.loss.direction,
            grid: cfg.search,
            lrs: cfg.lrs.clone(),
            mixture,
            stream,
        })
    }

    fn rng(&self) -> Rng {
        Rng::new(self.seed)
    }

    /// Trains the source model, or loads it when a path is configured.
    pub fn source_model(&self) -> CliResult<Model> {
        let model = match &self.source_path {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                serde_json::from_str::<Model>(&text)
                    .map_err(|e| CliError::Usage(format!("source model {}: {e}", path.display())))?
            }
            None => {
                let mut rng = self.rng().split(SOURCE_STREAM);
                bench::train_source_model(&self.mixture, &self.source, &mut rng).map_err(CliError::from_runtime)?
            }
        };
        if model.classes() != self.mixture.classes || model.input_dim() != self.mixture.dim {
            return Err(CliError::Usage(format!(
                "source model is {} -> {}, task needs {} -> {}",
                model.input_dim(),
                model.classes(),
                self.mixture.dim,
                self.mixture.classes
            )));
        }
        Ok(model)
    }

    /// One protocol run of `plugin` at learning rate `lr`.
    pub fn run_with(&self, source: &Model, plugin: &LossPlugin, lr: f64) -> Result<ProtocolReport> {
        let cfg = AdaptConfig::new(SgdConfig { lr, ..self.sgd });
        bench::run_protocol(
            source,
            &self.mixture,
            &self.stream,
            plugin,
            &cfg,
            &self.rng().split(TARGET_STREAM),
        )
    }

    /// The configured run plus the `lr = 0` baseline.
    pub fn run(&self, source: &Model) -> CliResult<(ProtocolReport, ProtocolReport)> {
        let lrs = [self.sgd.lr, 0.0];
        let mut out: Vec<ProtocolReport> = lrs
            .par_iter()
            .map(|&lr| self.run_with(source, &self.plugin, lr))
            .collect::<Result<_>>()
            .map_err(CliError::from_runtime)?;
        let baseline = out.pop().expect("two runs");
        Ok((out.pop().expect("two runs"), baseline))
    }

    /// Overall accuracy of `plugin` at each configured learning rate.
    pub fn lr_sweep(&self, source: &Model, plugin: &LossPlugin) -> CliResult<LrSweep> {
        let mut lrs = vec![0.0];
        lrs.extend_from_slice(&self.lrs);
        let acc: Vec<f64> = lrs
            .par_iter()
            .map(|&lr| self.run_with(source, plugin, lr).map(|r| r.overall.accuracy))
            .collect::<Result<_>>()
            .map_err(CliError::from_runtime)?;
        Ok(LrSweep {
            baseline: acc[0],
            points: self
                .lrs
                .iter()
                .zip(&acc[1..])
                .map(|(&lr, &accuracy)| LrPoint { lr, accuracy })
                .collect(),
        })
    }

    /// Seeded scoring mask over the whole target stream.
    pub fn scoring_mask(&self) -> Vec<bool> {
        let total = self.stream.shifts.len() * self.stream.batches_per_shift * self.stream.batch_size;
        let keep = ((self.grid.subset_fraction * total as f64).round() as usize).clamp(1, total);
        let mut idx: Vec<usize> = (0..total).collect();
        self.rng().split(SUBSET_STREAM).shuffle(&mut idx);
        let mut mask = vec![false; total];
        idx[..keep].iter().for_each(|&i| mask[i] = true);
        mask
    }

    /// Scores every valid `(τ, α)` on the labelled subset at the configured
    /// learning rate.
    pub fn grid_search(&self, source: &Model) -> CliResult<GridOutcome> {
        let candidates = self.grid.candidates().map_err(CliError::from_validation)?;
        let mask = self.scoring_mask();
        let scores: Vec<Option<GridScore>> = candidates
            .par_iter()
            .map(|c| -> Result<Option<GridScore>> {
                if !c.valid {
                    return Ok(None);
                }
                let cfg = c.config(self.direction)?;
                let report = self.run_with(source, &LossPlugin::Dem(cfg), self.sgd.lr)?;
                Ok(Some(GridScore::of(&report, &mask)))
            })
            .collect::<Result<_>>()
            .map_err(CliError::from_runtime)?;
        let table: Vec<TrialResult> = candidates
            .iter()
            .zip(&scores)
            .map(|(c, s)| TrialResult {
                tau: c.tau,
                alpha: c.alpha,
                valid: c.valid,
                accuracy: s.map(|s| s.subset),
            })
            .collect();
        let best = search::select_best(&table).map_err(CliError::from_runtime)?;
        let full_of = |tau: f64, alpha: f64| {
            candidates
                .iter()
                .zip(&scores)
                .find(|(c, _)| c.tau == tau && c.alpha == alpha)
                .and_then(|(_, s)| *s)
        };
        let best_scores = full_of(best.tau, best.alpha).expect("best point was scored");
        // the classical point may sit outside a custom grid
        let classical = match full_of(1.0, 1.0) {
            Some(s) => s,
            None => {
                let report = self
                    .run_with(source, &LossPlugin::Dem(DemConfig::classical()), self.sgd.lr)
                    .map_err(CliError::from_runtime)?;
                GridScore::of(&report, &mask)
            }
        };
        Ok(GridOutcome {
            best,
            best_full_accuracy: best_scores.full,
            classical,
            table,
        })
    }
}

/// Accuracy on the scoring subset and on the whole stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridScore {
    pub subset: f64,
    pub full: f64,
}

impl GridScore {
    fn of(report: &ProtocolReport, mask: &[bool]) -> Self {
        let (mut hit, mut n) = (0usize, 0usize);
        let rows = report.shifts.iter().flat_map(|s| s.probs.iter_rows().zip(&s.labels));
        for ((p, &y), &keep) in rows.zip(mask) {
            if keep {
                n += 1;
                hit += usize::from(argmax(p) == y);
            }
        }
        GridScore {
            subset: hit as f64 / n.max(1) as f64,
            full: report.overall.accuracy,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub best: TrialResult,
    pub best_full_accuracy: f64,
    /// The `(1, 1)` point, i.e. classical EM.
    pub classical: GridScore,
    pub table: Vec<TrialResult>,
}
