//! Tiny classifiers with hand-written backpropagation, SGD, source training
//! and the online adaptation loop.
//!
//! Parameters are exposed as an ordered list of flat segments
//! (`[W, b]` for the linear head, `[W1, b1, W2, b2]` for the MLP) so the
//! optimizer and gradient checks can treat every architecture alike.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adadem::{self, AdaDemKind, AdaDemVariant, MecState};
use crate::losses::{self, DemConfig, Direction, Logits, LossEval};
use crate::numkit::{self, Matrix, Rng};
use crate::{Error, Result};

/// Softmax-regression head: `z = W x + b`, `W` is `C × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmax {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearSoftmax {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        LinearSoftmax {
            weight: Matrix::zeros(classes, dim),
            bias: vec![0.0; classes],
        }
    }

    /// Entries drawn from `N(0, scale²)`.
    pub fn random(classes: usize, dim: usize, scale: f64, rng: &mut Rng) -> Self {
        let mut m = Self::zeros(classes, dim);
        m.weight.as_mut_slice().iter_mut().for_each(|w| *w = scale * rng.normal());
        m.bias.iter_mut().for_each(|b| *b = scale * rng.normal());
        m
    }
}

/// One hidden rectifier layer: `z = W2 relu(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl Mlp {
    /// He-scaled normal weights, zero biases.
    pub fn random(dim: usize, hidden: usize, classes: usize, rng: &mut Rng) -> Self {
        let mut w1 = Matrix::zeros(hidden, dim);
        let s1 = libm::sqrt(2.0 / dim as f64);
        w1.as_mut_slice().iter_mut().for_each(|w| *w = s1 * rng.normal());
        let mut w2 = Matrix::zeros(classes, hidden);
        let s2 = libm::sqrt(2.0 / hidden as f64);
        w2.as_mut_slice().iter_mut().for_each(|w| *w = s2 * rng.normal());
        Mlp {
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; classes],
        }
    }

    fn hidden_pre(&self, x: &[f64]) -> Vec<f64> {
        (0..self.w1.rows())
            .map(|j| losses::dot(self.w1.row(j), x) + self.b1[j])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Linear(LinearSoftmax),
    Mlp(Mlp),
}

/// Parameter gradients laid out like [`Model::segments`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub segments: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn is_zero(&self) -> bool {
        self.segments.iter().flatten().all(|&g| g == 0.0)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.segments.iter().flatten().copied().collect()
    }

    /// `self += w · other`.
    pub fn add_scaled(&mut self, other: &ParamGrads, w: f64) {
        for (a, b) in self.segments.iter_mut().zip(&other.segments) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += w * y;
            }
        }
    }
}

impl Model {
    pub fn classes(&self) -> usize {
        match self {
            Model::Linear(m) => m.weight.rows(),
            Model::Mlp(m) => m.w2.rows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Linear(m) => m.weight.cols(),
            Model::Mlp(m) => m.w1.cols(),
        }
    }

    pub fn segments(&self) -> Vec<&[f64]> {
        match self {
            Model::Linear(m) => vec![m.weight.as_slice(), &m.bias],
            Model::Mlp(m) => vec![m.w1.as_slice(), &m.b1, m.w2.as_slice(), &m.b2],
        }
    }

    pub fn segments_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Model::Linear(m) => vec![m.weight.as_mut_slice(), &mut m.bias],
            Model::Mlp(m) => vec![
                m.w1.as_mut_slice(),
                &mut m.b1,
                m.w2.as_mut_slice(),
                &mut m.b2,
            ],
        }
    }

    /// Index of the first segment belonging to the final linear layer.
    pub fn head_start(&self) -> usize {
        match self {
            Model::Linear(_) => 0,
            Model::Mlp(_) => 2,
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.segments().into_iter().flatten().copied().collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.segments().iter().map(|s| s.len()).sum();
        if flat.len() != total {
            return Err(Error::Dimension {
                expected: total,
                got: flat.len(),
            });
        }
        let mut off = 0;
        for seg in self.segments_mut() {
            let n = seg.len();
            seg.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Euclidean distance between the parameter vectors of two models of the
    /// same shape.
    pub fn param_distance(&self, other: &Model) -> f64 {
        let a = self.flat_params();
        let b = other.flat_params();
        libm::sqrt(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// Logits for every row of `x`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let c = self.classes();
        let mut out = Matrix::zeros(x.rows(), c);
        for (i, xi) in x.iter_rows().enumerate() {
            let row = out.row_mut(i);
            match self {
                Model::Linear(m) => {
                    for (k, zk) in row.iter_mut().enumerate() {
                        *zk = losses::dot(m.weight.row(k), xi) + m.bias[k];
                    }
                }
                Model::Mlp(m) => {
                    let a: Vec<f64> = m.hidden_pre(xi).into_iter().map(|h| h.max(0.0)).collect();
                    for (k, zk) in row.iter_mut().enumerate() {
                        *zk = losses::dot(m.w2.row(k), &a) + m.b2[k];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradients of the batch-mean loss given per-sample `∂loss/∂z` rows.
    pub fn backward(&self, x: &Matrix, dlogits: &Matrix) -> Result<ParamGrads> {
        self.check_input(x)?;
        if dlogits.rows() != x.rows() {
            return Err(Error::Dimension {
                expected: x.rows(),
                got: dlogits.rows(),
            });
        }
        if dlogits.cols() != self.classes() {
            return Err(Error::Dimension {
                expected: self.classes(),
                got: dlogits.cols(),
            });
        }
        let mut segments: Vec<Vec<f64>> = self.segments().iter().map(|s| vec![0.0; s.len()]).collect();
        let n = x.rows();
        if n == 0 {
            return Ok(ParamGrads { segments });
        }
        let inv = 1.0 / n as f64;
        let d = self.input_dim();
        match self {
            Model::Linear(_) => {
                let (gw, rest) = segments.split_at_mut(1);
                let (gw, gb) = (&mut gw[0], &mut rest[0]);
                for (xi, dz) in x.iter_rows().zip(dlogits.iter_rows()) {
                    for (k, &g) in dz.iter().enumerate() {
                        let g = g * inv;
                        gb[k] += g;
                        for (w, &xv) in gw[k * d..(k + 1) * d].iter_mut().zip(xi) {
                            *w += g * xv;
                        }
                    }
                }
            }
            Model::Mlp(m) => {
                let h = m.w1.rows();
                let [gw1, gb1, gw2, gb2] = &mut segments[..] else {
                    unreachable!("mlp has four segments")
                };
                for (xi, dz) in x.iter_rows().zip(dlogits.iter_rows()) {
                    let pre = m.hidden_pre(xi);
                    let mut da = vec![0.0; h];
                    for (k, &g) in dz.iter().enumerate() {
                        let g = g * inv;
                        gb2[k] += g;
                        let w2k = m.w2.row(k);
                        for j in 0..h {
                            gw2[k * h + j] += g * pre[j].max(0.0);
                            da[j] += g * w2k[j];
                        }
                    }
                    for j in 0..h {
                        if pre[j] <= 0.0 {
                            continue;
                        }
                        gb1[j] += da[j];
                        for (w, &xv) in gw1[j * d..(j + 1) * d].iter_mut().zip(xi) {
                            *w += da[j] * xv;
                        }
                    }
                }
            }
        }
        Ok(ParamGrads { segments })
    }
}

/// `logsumexp(z) − z_target` with gradient `softmax(z) − onehot(target)`.
pub fn cross_entropy_eval(z: &Logits, target: usize) -> Result<LossEval> {
    if target >= z.classes() {
        return Err(Error::domain(format!(
            "target {target} out of range for {} classes",
            z.classes()
        )));
    }
    let lse = numkit::logsumexp(z)?;
    let mut grad = numkit::softmax(z)?;
    grad[target] -= 1.0;
    Ok(LossEval {
        value: lse - z[target],
        grad,
    })
}

/// Which parameters an optimizer may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    All,
    /// Only the final linear layer.
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub scope: Scope,
}

impl SgdConfig {
    pub fn vanilla(lr: f64) -> Self {
        SgdConfig {
            lr,
            momentum: 0.0,
            scope: Scope::All,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::domain(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::domain(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `v ← μ v + g`, `θ ← θ − lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Option<Vec<Vec<f64>>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Sgd {
            cfg,
            velocity: None,
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn step(&mut self, model: &mut Model, grads: &ParamGrads) -> Result<()> {
        let first = match self.cfg.scope {
            Scope::All => 0,
            Scope::Head => model.head_start(),
        };
        let mut params = model.segments_mut();
        if grads.segments.len() != params.len() {
            return Err(Error::Dimension {
                expected: params.len(),
                got: grads.segments.len(),
            });
        }
        let velocity = self
            .velocity
            .get_or_insert_with(|| grads.segments.iter().map(|g| vec![0.0; g.len()]).collect());
        let (lr, mu) = (self.cfg.lr, self.cfg.momentum);
        for (s, (p, g)) in params.iter_mut().zip(&grads.segments).enumerate().skip(first) {
            if p.len() != g.len() {
                return Err(Error::Dimension {
                    expected: p.len(),
                    got: g.len(),
                });
            }
            for ((theta, &gi), v) in p.iter_mut().zip(g).zip(velocity[s].iter_mut()) {
                *v = mu * *v + gi;
                *theta -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Mini-batch SGD on mean cross-entropy. Deterministic for a given `rng`.
pub fn train_source(
    model: &mut Model,
    x: &Matrix,
    y: &[usize],
    epochs: usize,
    batch_size: usize,
    cfg: SgdConfig,
    rng: &mut Rng,
) -> Result<()> {
    if x.rows() == 0 || x.rows() != y.len() {
        return Err(Error::domain(format!(
            "need matching non-empty data, got {} rows and {} labels",
            x.rows(),
            y.len()
        )));
    }
    if batch_size == 0 {
        return Err(Error::domain("batch size must be positive"));
    }
    let mut opt = Sgd::new(cfg)?;
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            let xb = x.select_rows(chunk);
            let logits = model.forward(&xb)?;
            let mut dz = Matrix::zeros(chunk.len(), model.classes());
            for (r, &i) in chunk.iter().enumerate() {
                let z = Logits::from_slice(logits.row(r))?;
                dz.row_mut(r).copy_from_slice(&cross_entropy_eval(&z, y[i])?.grad);
            }
            let grads = model.backward(&xb, &dz)?;
            opt.step(model, &grads)?;
        }
    }
    Ok(())
}

/// Fraction of rows of `x` whose argmax logit equals the label.
pub fn accuracy(model: &Model, x: &Matrix, y: &[usize]) -> Result<f64> {
    let logits = model.forward(x)?;
    let hits = logits
        .iter_rows()
        .zip(y)
        .filter(|(z, &t)| numkit::argmax(z) == t)
        .count();
    Ok(hits as f64 / y.len().max(1) as f64)
}

/// The unsupervised (or supervised) objective driving adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum LossPlugin {
    /// Supervised reference; `targets` cover the whole stream in order.
    CrossEntropy { targets: Vec<usize> },
    Em {
        #[serde(default)]
        direction: Direction,
    },
    Dem(DemConfig),
    AdaDem {
        variant: AdaDemVariant,
        state: MecState,
        #[serde(default)]
        direction: Direction,
    },
}

impl LossPlugin {
    pub fn em() -> Self {
        LossPlugin::Em {
            direction: Direction::Minimize,
        }
    }

    /// AdaDEM with a fresh calibrator of the given momentum.
    pub fn adadem(classes: usize, variant: AdaDemVariant, momentum: f64) -> Result<Self> {
        Ok(LossPlugin::AdaDem {
            variant,
            state: MecState::with_momentum(classes, momentum)?,
            direction: Direction::Minimize,
        })
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self {
            LossPlugin::AdaDem { state, .. } if state.classes() != classes => Err(Error::Dimension {
                expected: classes,
                got: state.classes(),
            }),
            LossPlugin::Dem(cfg) => cfg.validate(),
            _ => Ok(()),
        }
    }

    /// Per-sample evaluations for a block of logits. `offset` is the stream
    /// position of the first row (only the cross-entropy plugin uses it).
    pub fn eval_batch(&mut self, logits: &Matrix, offset: usize) -> Result<Vec<LossEval>> {
        let rows: Vec<Logits> = logits
            .iter_rows()
            .map(Logits::from_slice)
            .collect::<Result<_>>()?;
        match self {
            LossPlugin::CrossEntropy { targets } => rows
                .iter()
                .enumerate()
                .map(|(i, z)| {
                    let t = *targets.get(offset + i).ok_or_else(|| {
                        Error::domain(format!("no target for stream position {}", offset + i))
                    })?;
                    cross_entropy_eval(z, t)
                })
                .collect(),
            LossPlugin::Em { direction } => Ok(rows.iter().map(|z| losses::em_eval(z, *direction)).collect()),
            LossPlugin::Dem(cfg) => rows.iter().map(|z| losses::dem_eval(z, cfg)).collect(),
            LossPlugin::AdaDem {
                variant,
                state,
                direction,
            } => adadem::adadem_eval(&rows, state, variant, *direction),
        }
    }

    /// The calibrator state, for AdaDEM plugins.
    pub fn mec_state(&self) -> Option<&MecState> {
        match self {
            LossPlugin::AdaDem { state, .. } => Some(state),
            _ => None,
        }
    }
}

/// Mean loss at logits `z` with every AdaDEM constant (calibrator row and
/// `δ`) frozen at the logits `z0` where `after` was evaluated. `before` is
/// the plugin state prior to that evaluation; stateless plugins simply
/// re-evaluate it at `z`. This is the objective whose gradient
/// [`adapt_stream`] follows.
pub fn frozen_mean_loss(after: &LossPlugin, before: &LossPlugin, z0: &Matrix, z: &Matrix) -> Result<f64> {
    let n = z.rows();
    if n == 0 || z0.rows() != n {
        return Err(Error::Dimension {
            expected: z0.rows(),
            got: n,
        });
    }
    let total: f64 = match after {
        LossPlugin::AdaDem { variant, state, direction } => {
            let mut sum = 0.0;
            for r in 0..n {
                let l0 = Logits::from_slice(z0.row(r))?;
                let p0 = l0.probs();
                let k = adadem::pseudo_label(&p0);
                let c: Vec<f64> = match variant.kind {
                    AdaDemKind::NormOnly => p0,
                    _ => state.row(k).iter().map(|v| variant.mec_alpha * v).collect(),
                };
                let d = match variant.kind {
                    AdaDemKind::MecOnly => 1.0,
                    _ => match adadem::delta(&l0, variant.norm, variant.delta_source) {
                        Ok(d) => d,
                        Err(Error::DegenerateDelta(d)) => d,
                        Err(e) => return Err(e),
                    }
                    .max(adadem::DELTA_FLOOR),
                };
                let p = numkit::softmax(z.row(r))?;
                sum += direction.sign() * adadem::adadem_sample(z.row(r), &p, &c, d).value;
            }
            sum
        }
        _ => {
            let mut p = before.clone();
            p.eval_batch(z, 0)?.iter().map(|e| e.value).sum()
        }
    };
    Ok(total / n as f64)
}

/// Labelled source batches mixed into every adaptation step:
/// `loss = CE(labelled) + unsup_weight · plugin(unlabelled)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMix {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub batch_size: usize,
    pub unsup_weight: f64,
}

impl LabeledMix {
    /// Weight used for entropy terms in semi-supervised mixes.
    pub const DEFAULT_WEIGHT: f64 = 0.3;
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub sgd: SgdConfig,
    pub labeled_mix: Option<LabeledMix>,
}

impl AdaptConfig {
    pub fn new(sgd: SgdConfig) -> Self {
        AdaptConfig {
            sgd,
            labeled_mix: None,
        }
    }
}

/// What happened on one stream batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTrace {
    /// Softmax predictions made before this batch's update.
    pub probs: Matrix,
    pub mean_loss: f64,
    /// `‖θ_after − θ_before‖₂`.
    pub param_step: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdaptTrace {
    pub batches: Vec<BatchTrace>,
}

impl AdaptTrace {
    /// All predictions stacked in stream order.
    pub fn all_probs(&self) -> Matrix {
        self.batches
            .iter()
            .fold(Matrix::zeros(0, 0), |acc, b| acc.vstack(&b.probs).expect("consistent class count"))
    }
}

fn probs_of(logits: &Matrix) -> Result<Matrix> {
    let mut p = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        p.row_mut(r).copy_from_slice(&numkit::softmax(logits.row(r))?);
    }
    Ok(p)
}

fn mean_and_dlogits(evals: &[LossEval], classes: usize) -> Result<(f64, Matrix)> {
    let mut dz = Matrix::zeros(evals.len(), classes);
    let mut total = 0.0;
    for (r, e) in evals.iter().enumerate() {
        if !e.value.is_finite() || e.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("loss evaluation for sample {r}")));
        }
        total += e.value;
        dz.row_mut(r).copy_from_slice(&e.grad);
    }
    Ok((total / evals.len().max(1) as f64, dz))
}

/// Online adaptation: for each batch, predict, evaluate `plugin` on those
/// logits, back-propagate the batch mean and take one SGD step.
///
/// The stream carries no labels; predictions are recorded before the update
/// so callers can score them online.
pub fn adapt_stream(
    model: &mut Model,
    stream: &[Matrix],
    plugin: &mut LossPlugin,
    cfg: &AdaptConfig,
) -> Result<AdaptTrace> {
    plugin.check_classes(model.classes())?;
    let mut opt = Sgd::new(cfg.sgd)?;
    let mut trace = AdaptTrace::default();
    let mut offset = 0;
    for (t, xb) in stream.iter().enumerate() {
        let logits = model.forward(xb)?;
        let probs = probs_of(&logits)?;
        let evals = plugin.eval_batch(&logits, offset)?;
        offset += xb.rows();
        let (mean_loss, dz) = mean_and_dlogits(&evals, model.classes())?;
        let mut grads = model.backward(xb, &dz)?;

        if let Some(mix) = &cfg.labeled_mix {
            grads.segments.iter_mut().flatten().for_each(|g| *g *= mix.unsup_weight);
            let n = mix.x.rows();
            if n > 0 && mix.batch_size > 0 {
                let idx: Vec<usize> = (0..mix.batch_size).map(|j| (t * mix.batch_size + j) % n).collect();
                let xl = mix.x.select_rows(&idx);
                let zl = model.forward(&xl)?;
                let evals = idx
                    .iter()
                    .enumerate()
                    .map(|(r, &i)| cross_entropy_eval(&Logits::from_slice(zl.row(r))?, mix.y[i]))
                    .collect::<Result<Vec<_>>>()?;
                let (_, dzl) = mean_and_dlogits(&evals, model.classes())?;
                grads.add_scaled(&model.backward(&xl, &dzl)?, 1.0);
            }
        }

        let before = model.flat_params();
        opt.step(model, &grads)?;
        let after = model.flat_params();
        let param_step = libm::sqrt(before.iter().zip(&after).map(|(a, b)| (a - b) * (a - b)).sum());
        trace.batches.push(BatchTrace {
            probs,
            mean_loss,
            param_step,
        });
    }
    Ok(trace)
}
