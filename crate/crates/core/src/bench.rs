//! Synthetic source / shifted-target data, adaptation protocols and the
//! diagnostics used to spot reward collapse and easy-class bias.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{self, AdaptConfig, LinearSoftmax, LossPlugin, Mlp, Model, SgdConfig};
use crate::numkit::{argmax, Matrix, Rng};
use crate::{Error, Result};

/// Magnitude multipliers for severity levels 1..=5.
pub const LEVEL_MULTIPLIERS: [f64; 5] = [0.5, 1.0, 1.5, 2.0, 2.5];

/// Smoothing added to both marginals before taking a KL divergence.
pub const KL_SMOOTHING: f64 = 1e-12;

/// Gaussian mixture with isotropic per-class spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub classes: usize,
    pub dim: usize,
    pub means: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    pub priors: Vec<f64>,
}

impl MixtureSpec {
    pub fn new(means: Vec<Vec<f64>>, sigma: Vec<f64>, priors: Vec<f64>) -> Result<Self> {
        let classes = means.len();
        let dim = means.first().map_or(0, Vec::len);
        let spec = MixtureSpec {
            classes,
            dim,
            means,
            sigma,
            priors,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `classes` means evenly spaced on a circle of `radius` in the first two
    /// coordinates (remaining coordinates zero), uniform priors.
    pub fn circle(classes: usize, dim: usize, radius: f64, sigma: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::domain("circle layout needs dim >= 2"));
        }
        let means = (0..classes)
            .map(|k| {
                let a = core::f64::consts::TAU * k as f64 / classes as f64;
                let mut m = vec![0.0; dim];
                m[0] = radius * libm::cos(a);
                m[1] = radius * libm::sin(a);
                m
            })
            .collect();
        Self::new(means, vec![sigma; classes], vec![1.0 / classes as f64; classes])
    }

    /// 10 classes in the plane, radius 4, unit spread.
    pub fn default_task() -> Self {
        Self::circle(10, 2, 4.0, 1.0).expect("valid default mixture")
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::domain(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.dim == 0 || self.means.iter().any(|m| m.len() != self.dim) {
            return Err(Error::domain("class means must share a positive dimension"));
        }
        if self.sigma.len() != self.classes || self.sigma.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::domain("need one non-negative sigma per class"));
        }
        check_simplex(&self.priors, self.classes)
    }
}

fn check_simplex(p: &[f64], classes: usize) -> Result<()> {
    if p.len() != classes {
        return Err(Error::Dimension {
            expected: classes,
            got: p.len(),
        });
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("priors must lie on the simplex (sum = {sum})")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// `X + m u` with `u = (1, …, 1) / √d`.
    Translate,
    /// Rotation of the plane by `m` radians.
    Rotate2d,
    /// `X + m N(0, I)`.
    FeatureNoise,
    /// `X (1 + m)`.
    FeatureScale,
}

impl ShiftKind {
    fn id(self) -> u64 {
        match self {
            ShiftKind::Translate => 1,
            ShiftKind::Rotate2d => 2,
            ShiftKind::FeatureNoise => 3,
            ShiftKind::FeatureScale => 4,
        }
    }

    /// Base magnitude used when a config names only kind and level.
    pub fn default_magnitude(self) -> f64 {
        match self {
            ShiftKind::Translate => 1.0,
            ShiftKind::Rotate2d => 0.2,
            ShiftKind::FeatureNoise => 0.9,
            ShiftKind::FeatureScale => 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
    pub level: u8,
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind, magnitude: f64, level: u8) -> Result<Self> {
        let s = ShiftSpec {
            kind,
            magnitude,
            level,
        };
        s.effective_magnitude()?;
        Ok(s)
    }

    pub fn at_level(kind: ShiftKind, level: u8) -> Result<Self> {
        Self::new(kind, kind.default_magnitude(), level)
    }

    /// `magnitude × LEVEL_MULTIPLIERS[level − 1]`.
    pub fn effective_magnitude(&self) -> Result<f64> {
        if !(1..=5).contains(&self.level) {
            return Err(Error::domain(format!("severity level must be 1..=5, got {}", self.level)));
        }
        if !self.magnitude.is_finite() {
            return Err(Error::domain("shift magnitude must be finite"));
        }
        Ok(self.magnitude * LEVEL_MULTIPLIERS[self.level as usize - 1])
    }

    fn stream_id(&self, occurrence: u64) -> u64 {
        // FNV-1a over the fields, so the data a shift receives depends on
        // what the shift is, not on where it sits in a sequence.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for word in [self.kind.id(), self.magnitude.to_bits(), self.level as u64, occurrence] {
            for b in word.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    /// Fresh copy of the source model (and loss state) for every shift.
    SingleDomain,
    /// One model carried through the whole shift sequence.
    Continual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub mode: StreamMode,
    pub shifts: Vec<ShiftSpec>,
    pub batches_per_shift: usize,
    pub batch_size: usize,
    pub label_priors: Vec<f64>,
}

impl StreamSpec {
    pub fn validate(&self, mixture: &MixtureSpec) -> Result<()> {
        if self.shifts.is_empty() {
            return Err(Error::domain("stream needs at least one shift"));
        }
        if self.mode == StreamMode::Continual && self.shifts.len() < 2 {
            return Err(Error::domain("continual streams need at least two shifts"));
        }
        if self.batches_per_shift == 0 || self.batch_size == 0 {
            return Err(Error::domain("batch counts and sizes must be positive"));
        }
        for s in &self.shifts {
            s.effective_magnitude()?;
            if s.kind == ShiftKind::Rotate2d && mixture.dim != 2 {
                return Err(Error::domain(format!("rotate2d needs dim = 2, got {}", mixture.dim)));
            }
        }
        check_simplex(&self.label_priors, mixture.classes)
    }

    /// One shift, 100 balanced batches of 64.
    pub fn single(shift: ShiftSpec, classes: usize) -> Self {
        StreamSpec {
            mode: StreamMode::SingleDomain,
            shifts: vec![shift],
            batches_per_shift: 100,
            batch_size: 64,
            label_priors: vec![1.0 / classes as f64; classes],
        }
    }

    /// Level-5 rotation on the default mixture.
    pub fn default_single_domain() -> Self {
        Self::single(
            ShiftSpec::at_level(ShiftKind::Rotate2d, 5).expect("valid level"),
            MixtureSpec::default_task().classes,
        )
    }

    /// Rotation drifting through levels 3, 4 and 5 without resets.
    pub fn default_continual() -> Self {
        let shifts = (3..=5)
            .map(|l| ShiftSpec::at_level(ShiftKind::Rotate2d, l).expect("valid level"))
            .collect();
        StreamSpec {
            mode: StreamMode::Continual,
            shifts,
            ..Self::default_single_domain()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub rho: f64,
}

impl ImbalanceSpec {
    pub fn priors(&self, classes: usize) -> Result<Vec<f64>> {
        long_tail_priors(classes, self.rho)
    }
}

/// Exponential long-tail profile `prior_k ∝ ρ^(−k/(C−1))`, so that
/// `prior_0 / prior_{C−1} = ρ`.
pub fn long_tail_priors(classes: usize, rho: f64) -> Result<Vec<f64>> {
    if classes < 2 {
        return Err(Error::domain(format!("need at least 2 classes, got {classes}")));
    }
    if !(rho >= 1.0) || !rho.is_finite() {
        return Err(Error::domain(format!("imbalance ratio must be >= 1, got {rho}")));
    }
    let last = (classes - 1) as f64;
    let w: Vec<f64> = (0..classes).map(|k| libm::pow(rho, -(k as f64) / last)).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// `n` labelled draws: `y ~ priors`, `x ~ N(mean_y, sigma_y² I)`.
pub fn sample_batch(spec: &MixtureSpec, priors: &[f64], n: usize, rng: &mut Rng) -> Result<(Matrix, Vec<usize>)> {
    check_simplex(priors, spec.classes)?;
    if n == 0 {
        return Err(Error::domain("batch size must be positive"));
    }
    let mut x = Matrix::zeros(n, spec.dim);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let k = rng.categorical(priors);
        let (mean, s) = (&spec.means[k], spec.sigma[k]);
        for (v, &m) in x.row_mut(i).iter_mut().zip(mean) {
            *v = m + s * rng.normal();
        }
        y.push(k);
    }
    Ok((x, y))
}

/// Applies one shift to every row of `x`.
pub fn apply_shift(x: &Matrix, spec: &ShiftSpec, rng: &mut Rng) -> Result<Matrix> {
    let m = spec.effective_magnitude()?;
    let d = x.cols();
    let mut out = x.clone();
    match spec.kind {
        ShiftKind::Translate => {
            let u = m / libm::sqrt(d as f64);
            out.as_mut_slice().iter_mut().for_each(|v| *v += u);
        }
        ShiftKind::Rotate2d => {
            if d != 2 {
                return Err(Error::domain(format!("rotate2d needs 2 columns, got {d}")));
            }
            let (s, c) = (libm::sin(m), libm::cos(m));
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let (a, b) = (row[0], row[1]);
                row[0] = c * a - s * b;
                row[1] = s * a + c * b;
            }
        }
        ShiftKind::FeatureNoise => {
            out.as_mut_slice().iter_mut().for_each(|v| *v += m * rng.normal());
        }
        ShiftKind::FeatureScale => {
            out.as_mut_slice().iter_mut().for_each(|v| *v *= 1.0 + m);
        }
    }
    Ok(out)
}

/// Online diagnostics over a set of predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// Entropy of the mean predicted distribution.
    pub marginal_entropy: f64,
    /// `KL(mean prediction ‖ empirical label marginal)`.
    pub kl_output_vs_label: f64,
    /// Argmax frequencies, largest first.
    pub sorted_class_proportions: Vec<f64>,
    pub avg_max_prob: f64,
    /// Mean predicted distribution.
    pub prediction_marginal: Vec<f64>,
}

/// `KL(p ‖ q)` after adding `eps` to both sides and renormalizing.
pub fn kl_divergence(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let sp: f64 = p.iter().sum::<f64>() + eps * p.len() as f64;
    let sq: f64 = q.iter().sum::<f64>() + eps * q.len() as f64;
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let a = (a + eps) / sp;
            let b = (b + eps) / sq;
            a * libm::log(a / b)
        })
        .sum()
}

/// Shannon entropy (nats); zero entries contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * libm::log(v)).sum::<f64>()
}

pub fn metrics(probs: &Matrix, labels: &[usize]) -> Result<MetricsReport> {
    let n = probs.rows();
    let c = probs.cols();
    if n == 0 {
        return Err(Error::domain("metrics need at least one prediction"));
    }
    if labels.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::domain(format!("label {bad} out of range for {c} classes")));
    }
    let mut tp = vec![0usize; c];
    let mut pred_count = vec![0usize; c];
    let mut label_count = vec![0usize; c];
    let mut marginal = vec![0.0; c];
    let mut max_prob = 0.0;
    for (p, &y) in probs.iter_rows().zip(labels) {
        let k = argmax(p);
        pred_count[k] += 1;
        label_count[y] += 1;
        if k == y {
            tp[k] += 1;
        }
        max_prob += p[k];
        for (m, &v) in marginal.iter_mut().zip(p) {
            *m += v;
        }
    }
    let nf = n as f64;
    marginal.iter_mut().for_each(|m| *m /= nf);
    let per_class_f1: Vec<f64> = (0..c)
        .map(|k| {
            let denom = pred_count[k] + label_count[k];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[k] as f64 / denom as f64
            }
        })
        .collect();
    let label_marginal: Vec<f64> = label_count.iter().map(|&v| v as f64 / nf).collect();
    let mut sorted: Vec<f64> = pred_count.iter().map(|&v| v as f64 / nf).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(MetricsReport {
        samples: n,
        accuracy: tp.iter().sum::<usize>() as f64 / nf,
        macro_f1: per_class_f1.iter().sum::<f64>() / c as f64,
        per_class_f1,
        marginal_entropy: entropy(&marginal),
        kl_output_vs_label: kl_divergence(&marginal, &label_marginal, KL_SMOOTHING),
        sorted_class_proportions: sorted,
        avg_max_prob: max_prob / nf,
        prediction_marginal: marginal,
    })
}

/// Affine temperature heuristic `τ = a + b · avg_max_prob`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauHeuristic {
    pub intercept: f64,
    pub slope: f64,
}

impl Default for TauHeuristic {
    fn default() -> Self {
        TauHeuristic {
            intercept: 0.5,
            slope: 1.5,
        }
    }
}

/// Heuristic temperature from source confidence on target data, clamped
/// to `[0.1, 2/α]` (`[0.1, 2]` when `α = 0`). Not a fitted relation.
pub fn suggest_tau(avg_max_prob: f64, alpha: f64, h: TauHeuristic) -> f64 {
    let hi = if alpha > 0.0 { 2.0 / alpha } else { 2.0 };
    let lo = 0.1_f64.min(hi);
    (h.intercept + h.slope * avg_max_prob).clamp(lo, hi)
}

/// How the source model is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub arch: Arch,
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    Linear,
    Mlp { hidden: usize },
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec {
            arch: Arch::Linear,
            samples: 5000,
            epochs: 20,
            batch_size: 64,
            lr: 0.1,
        }
    }
}

/// Trains a source model on clean draws from `mixture` (using its priors).
pub fn train_source_model(mixture: &MixtureSpec, spec: &SourceSpec, rng: &mut Rng) -> Result<Model> {
    mixture.validate()?;
    let mut init = rng.split(0x5eed);
    let mut model = match spec.arch {
        Arch::Linear => Model::Linear(LinearSoftmax::zeros(mixture.classes, mixture.dim)),
        Arch::Mlp { hidden } => {
            if hidden == 0 {
                return Err(Error::domain("mlp needs at least one hidden unit"));
            }
            Model::Mlp(Mlp::random(mixture.dim, hidden, mixture.classes, &mut init))
        }
    };
    let (x, y) = sample_batch(mixture, &mixture.priors, spec.samples, rng)?;
    model::train_source(
        &mut model,
        &x,
        &y,
        spec.epochs,
        spec.batch_size,
        SgdConfig::vanilla(spec.lr),
        rng,
    )?;
    Ok(model)
}

/// Unlabelled batches plus their hidden labels for one shift.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftData {
    pub batches: Vec<Matrix>,
    pub labels: Vec<usize>,
}

/// Target data for every shift of `stream`. Each shift draws from its own
/// generator derived from `rng`'s seed and the shift's content, so
/// reordering distinct shifts reorders the data with them.
pub fn target_data(mixture: &MixtureSpec, stream: &StreamSpec, rng: &Rng) -> Result<Vec<ShiftData>> {
    stream.validate(mixture)?;
    let mut out = Vec::with_capacity(stream.shifts.len());
    for (i, shift) in stream.shifts.iter().enumerate() {
        let occurrence = stream.shifts[..i].iter().filter(|s| *s == shift).count() as u64;
        let mut r = rng.split(shift.stream_id(occurrence));
        let mut batches = Vec::with_capacity(stream.batches_per_shift);
        let mut labels = Vec::with_capacity(stream.batches_per_shift * stream.batch_size);
        for _ in 0..stream.batches_per_shift {
            let (x, y) = sample_batch(mixture, &stream.label_priors, stream.batch_size, &mut r)?;
            batches.push(apply_shift(&x, shift, &mut r)?);
            labels.extend(y);
        }
        out.push(ShiftData { batches, labels });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftRun {
    pub shift: ShiftSpec,
    /// Online predictions, one row per target sample.
    pub probs: Matrix,
    pub labels: Vec<usize>,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolReport {
    pub shifts: Vec<ShiftRun>,
    pub overall: MetricsReport,
    /// The adapted model at the end of the stream (continual) or after the
    /// last shift (single domain).
    pub final_model: Model,
}

impl ProtocolReport {
    /// Mean of the per-shift accuracies.
    pub fn mean_accuracy(&self) -> f64 {
        self.shifts.iter().map(|s| s.metrics.accuracy).sum::<f64>() / self.shifts.len() as f64
    }
}

/// Runs the adaptation protocol and scores predictions online.
///
/// Labels are generated alongside the data but only reach the metrics; the
/// adaptation loop sees unlabelled batches.
pub fn run_protocol(
    source: &Model,
    mixture: &MixtureSpec,
    stream: &StreamSpec,
    plugin: &LossPlugin,
    cfg: &AdaptConfig,
    rng: &Rng,
) -> Result<ProtocolReport> {
    if source.input_dim() != mixture.dim || source.classes() != mixture.classes {
        return Err(Error::Dimension {
            expected: mixture.dim,
            got: source.input_dim(),
        });
    }
    let data = target_data(mixture, stream, rng)?;
    let mut model = source.clone();
    let mut loss = plugin.clone();
    let mut shifts = Vec::with_capacity(data.len());
    let mut all_probs = Matrix::zeros(0, mixture.classes);
    let mut all_labels = Vec::new();
    for (shift, d) in stream.shifts.iter().zip(data) {
        if stream.mode == StreamMode::SingleDomain {
            model = source.clone();
            loss = plugin.clone();
        }
        let trace = model::adapt_stream(&mut model, &d.batches, &mut loss, cfg)?;
        let probs = trace.all_probs();
        let m = metrics(&probs, &d.labels)?;
        all_probs = all_probs.vstack(&probs)?;
        all_labels.extend_from_slice(&d.labels);
        shifts.push(ShiftRun {
            shift: *shift,
            probs,
            labels: d.labels,
            metrics: m,
        });
    }
    Ok(ProtocolReport {
        overall: metrics(&all_probs, &all_labels)?,
        shifts,
        final_model: model,
    })
}
