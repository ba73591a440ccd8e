//! JSON experiment configuration.
//!
//! Every section has defaults, so `{}` describes the default single-domain
//! task. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use demkit_core::adadem::{AdaDemKind, AdaDemVariant, DeltaSource, NormKind, DEFAULT_MOMENTUM};
use demkit_core::bench::{long_tail_priors, Arch, MixtureSpec, ShiftKind, ShiftSpec, SourceSpec, StreamMode, StreamSpec};
use demkit_core::losses::{DemConfig, Direction};
use demkit_core::model::{LossPlugin, Scope, SgdConfig};
use demkit_core::search::{check_lrs, GridSpec, DEFAULT_LRS};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mixture: MixtureConfig,
    pub source: SourceConfig,
    pub stream: StreamConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub search: GridSpec,
    /// Learning rates for `lr-sweep`.
    pub lrs: Vec<f64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            mixture: MixtureConfig::default(),
            source: SourceConfig::default(),
            stream: StreamConfig::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            search: GridSpec::default(),
            lrs: DEFAULT_LRS.to_vec(),
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Class means evenly spaced on a circle in the first two coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    pub classes: usize,
    pub dim: usize,
    pub radius: f64,
    pub sigma: f64,
    /// Source-data imbalance ratio; 1 is balanced.
    pub rho: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            classes: 10,
            dim: 2,
            radius: 4.0,
            sigma: 1.0,
            rho: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub arch: Arch,
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Load a saved source model instead of training one.
    pub load: Option<PathBuf>,
}

impl Default for SourceConfig {
    fn default() -> Self {
        let s = SourceSpec::default();
        SourceConfig {
            arch: s.arch,
            samples: s.samples,
            epochs: s.epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            load: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub mode: StreamMode,
    pub shifts: Vec<ShiftConfig>,
    pub batches_per_shift: usize,
    pub batch_size: usize,
    /// Target label imbalance ratio; 1 is balanced.
    pub label_rho: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        let s = StreamSpec::default_single_domain();
        StreamConfig {
            mode: s.mode,
            shifts: s
                .shifts
                .iter()
                .map(|sh| ShiftConfig {
                    kind: sh.kind,
                    level: sh.level,
                    magnitude: None,
                })
                .collect(),
            batches_per_shift: s.batches_per_shift,
            batch_size: s.batch_size,
            label_rho: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub kind: ShiftKind,
    pub level: u8,
    /// Base magnitude; the kind's default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnitude: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub scope: Scope,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            momentum: 0.0,
            scope: Scope::All,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    #[default]
    Em,
    Dem,
    Adadem,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub name: LossName,
    pub tau: f64,
    pub alpha: f64,
    pub variant: AdaDemKind,
    pub norm: NormKind,
    pub delta_source: DeltaSource,
    /// Calibrator EMA weight on the newest batch.
    pub pi: f64,
    pub mec_alpha: f64,
    pub direction: Direction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            name: LossName::Em,
            tau: 1.0,
            alpha: 1.0,
            variant: AdaDemKind::Full,
            norm: NormKind::L1,
            delta_source: DeltaSource::Cadf,
            pi: DEFAULT_MOMENTUM,
            mec_alpha: 1.0,
            direction: Direction::Minimize,
        }
    }
}

impl LossConfig {
    pub fn plugin(&self, classes: usize) -> CliResult<LossPlugin> {
        let plugin = match self.name {
            LossName::Em => LossPlugin::Em {
                direction: self.direction,
            },
            LossName::Dem => LossPlugin::Dem(
                DemConfig::new(self.tau, self.alpha, self.direction).map_err(CliError::from_validation)?,
            ),
            LossName::Adadem => {
                if !(self.mec_alpha.is_finite() && self.mec_alpha >= 0.0) {
                    return Err(CliError::Usage(format!("mec_alpha must be finite and >= 0, got {}", self.mec_alpha)));
                }
                let variant = AdaDemVariant {
                    kind: self.variant,
                    mec_alpha: self.mec_alpha,
                    delta_source: self.delta_source,
                    norm: self.norm,
                };
                let mut p = LossPlugin::adadem(classes, variant, self.pi).map_err(CliError::from_validation)?;
                if let LossPlugin::AdaDem { direction, .. } = &mut p {
                    *direction = self.direction;
                }
                p
            }
        };
        Ok(plugin)
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn mixture_spec(&self) -> CliResult<MixtureSpec> {
        let m = &self.mixture;
        let mut spec = MixtureSpec::circle(m.classes, m.dim, m.radius, m.sigma).map_err(CliError::from_validation)?;
        spec.priors = long_tail_priors(m.classes, m.rho).map_err(CliError::from_validation)?;
        spec.validate().map_err(CliError::from_validation)?;
        Ok(spec)
    }

    pub fn source_spec(&self) -> CliResult<SourceSpec> {
        let s = &self.source;
        if let Arch::Mlp { hidden: 0 } = s.arch {
            return Err(CliError::Usage("source.arch.hidden must be at least 1".into()));
        }
        if s.samples == 0 || s.batch_size == 0 {
            return Err(CliError::Usage("source.samples and source.batch_size must be positive".into()));
        }
        if !(s.lr.is_finite() && s.lr >= 0.0) {
            return Err(CliError::Usage(format!("source.lr must be finite and >= 0, got {}", s.lr)));
        }
        Ok(SourceSpec {
            arch: s.arch,
            samples: s.samples,
            epochs: s.epochs,
            batch_size: s.batch_size,
            lr: s.lr,
        })
    }

    pub fn stream_spec(&self, mixture: &MixtureSpec) -> CliResult<StreamSpec> {
        let s = &self.stream;
        let shifts = s
            .shifts
            .iter()
            .map(|sh| match sh.magnitude {
                Some(m) => ShiftSpec::new(sh.kind, m, sh.level),
                None => ShiftSpec::at_level(sh.kind, sh.level),
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(CliError::from_validation)?;
        let spec = StreamSpec {
            mode: s.mode,
            shifts,
            batches_per_shift: s.batches_per_shift,
            batch_size: s.batch_size,
            label_priors: long_tail_priors(mixture.classes, s.label_rho).map_err(CliError::from_validation)?,
        };
        spec.validate(mixture).map_err(CliError::from_validation)?;
        Ok(spec)
    }

    pub fn sgd(&self) -> CliResult<SgdConfig> {
        let o = &self.optimizer;
        let cfg = SgdConfig {
            lr: o.lr,
            momentum: o.momentum,
            scope: o.scope,
        };
        cfg.validate().map_err(CliError::from_validation)?;
        Ok(cfg)
    }

    pub fn check_lrs(&self) -> CliResult<()> {
        check_lrs(&self.lrs).map_err(CliError::from_validation)
    }

    pub fn check_grid(&self) -> CliResult<()> {
        self.search.validate().map_err(CliError::from_validation)
    }
}
