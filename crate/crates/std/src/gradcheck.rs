//! Analytic gradients against central finite differences, per loss and end
//! to end through both model families.

use demkit_core::adadem::{self, AdaDemKind, AdaDemVariant, DeltaSource, NormKind};
use demkit_core::losses::{self, DemConfig, Direction, Logits, LossEval};
use demkit_core::model::{self, LinearSoftmax, LossPlugin, Mlp, Model};
use demkit_core::numkit::{finite_diff_grad, rel_err, softmax, Matrix, Rng, DEFAULT_FD_STEP};
use demkit_core::Result;

pub const TOLERANCE: f64 = 1e-5;

/// Added to the first analytic component by the corruption hook.
const CORRUPTION: f64 = 1e-3;

pub const CHECKS: [&str; 14] = [
    "em",
    "detached_em",
    "cadf_tempered",
    "dem",
    "cross_entropy",
    "adadem_full",
    "adadem_norm_only",
    "adadem_mec_only",
    "linear_em",
    "linear_dem",
    "linear_adadem",
    "mlp_em",
    "mlp_dem",
    "mlp_adadem",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    /// Where the worst error occurred.
    pub worst_input: String,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Runs `trials` random instances of every check. `corrupt` names a check
/// whose analytic gradient is deliberately perturbed.
pub fn run_suite(seed: u64, trials: usize, corrupt: Option<&str>) -> Result<Vec<CheckReport>> {
    let root = Rng::new(seed);
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let mut rng = root.split(i as u64 + 1);
            let mut report = CheckReport {
                name,
                instances: trials,
                max_rel_err: 0.0,
                worst_input: String::new(),
            };
            for t in 0..trials {
                let (mut analytic, numeric, input) = instance(name, &mut rng)?;
                if corrupt == Some(name) {
                    analytic[0] += CORRUPTION;
                }
                let err = analytic
                    .iter()
                    .zip(&numeric)
                    .map(|(&a, &b)| rel_err(a, b))
                    .fold(0.0, f64::max);
                if err.is_nan() || err > report.max_rel_err || t == 0 {
                    report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                    report.worst_input = input;
                }
            }
            Ok(report)
        })
        .collect()
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn random_logits(rng: &mut Rng) -> Vec<f64> {
    let c = 2 + rng.below(19);
    let scale = rng.uniform(0.1, 8.0);
    (0..c).map(|_| scale * rng.normal()).collect()
}

fn random_dem(rng: &mut Rng) -> DemConfig {
    let (tau, alpha) = if rng.below(4) == 0 {
        (rng.uniform(0.05, 3.0), 0.0)
    } else {
        let alpha = rng.uniform(0.01, 2.0);
        (rng.uniform(0.05, 1.0) * 2.0 / alpha, alpha)
    };
    DemConfig::new(tau, alpha, Direction::Minimize).expect("sampled inside the valid region")
}

fn random_simplex(c: usize, rng: &mut Rng) -> Vec<f64> {
    let z: Vec<f64> = (0..c).map(|_| 2.0 * rng.normal()).collect();
    softmax(&z).expect("finite")
}

type Instance = (Vec<f64>, Vec<f64>, String);

/// Central differences of a fallible objective; the first error wins.
fn fd<F>(mut f: F, z: &[f64]) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut failure = None;
    let grad = finite_diff_grad(
        |v| {
            f(v).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                f64::NAN
            })
        },
        z,
        DEFAULT_FD_STEP,
    )?;
    failure.map_or(Ok(grad), Err)
}

fn logit_check<F>(z: Vec<f64>, label: String, f: F) -> Result<Instance>
where
    F: Fn(&Logits) -> Result<LossEval>,
{
    let analytic = f(&Logits::new(z.clone())?)?.grad;
    let numeric = fd(|v| Ok(f(&Logits::from_slice(v)?)?.value), &z)?;
    let input = format!("{label} z={}", fmt_vec(&z));
    Ok((analytic, numeric, input.trim_start().to_string()))
}

fn instance(name: &str, rng: &mut Rng) -> Result<Instance> {
    match name {
        "em" => logit_check(random_logits(rng), String::new(), |z| Ok(losses::em_eval(z, Direction::Minimize))),
        "detached_em" => {
            // the detached form is a surrogate: its gradient must equal the
            // finite-difference gradient of the entropy itself
            let z = random_logits(rng);
            let analytic = losses::detached_em_eval(&Logits::new(z.clone())?).grad;
            let numeric = fd(
                |v| Ok(losses::conditional_entropy(&Logits::from_slice(v)?)),
                &z,
            )?;
            Ok((analytic, numeric, format!("z={}", fmt_vec(&z))))
        }
        "cadf_tempered" => {
            let tau = rng.uniform(0.05, 3.0);
            logit_check(random_logits(rng), format!("tau={tau}"), move |z| {
                losses::cadf_tempered_eval(z, tau)
            })
        }
        "dem" => {
            let cfg = random_dem(rng);
            logit_check(
                random_logits(rng),
                format!("tau={} alpha={}", cfg.tau, cfg.alpha),
                move |z| losses::dem_eval(z, &cfg),
            )
        }
        "cross_entropy" => {
            let z = random_logits(rng);
            let target = rng.below(z.len());
            logit_check(z, format!("target={target}"), move |z| model::cross_entropy_eval(z, target))
        }
        "adadem_full" | "adadem_norm_only" | "adadem_mec_only" => {
            let z = random_logits(rng);
            let logits = Logits::new(z.clone())?;
            let p = logits.probs();
            let norm = [NormKind::L1, NormKind::L2, NormKind::Linf][rng.below(3)];
            let (c, delta) = match name {
                "adadem_full" => {
                    let scale = rng.uniform(0.0, 2.0);
                    let c: Vec<f64> = random_simplex(z.len(), rng).iter().map(|v| scale * v).collect();
                    (c, adadem::delta(&logits, norm, DeltaSource::Cadf)?.max(adadem::DELTA_FLOOR))
                }
                "adadem_norm_only" => (p.clone(), adadem::delta(&logits, norm, DeltaSource::Cadf)?.max(adadem::DELTA_FLOOR)),
                _ => (random_simplex(z.len(), rng), 1.0),
            };
            let analytic = adadem::adadem_sample(&z, &p, &c, delta).grad;
            let numeric = fd(
                |v| Ok(adadem::adadem_sample(v, &softmax(v)?, &c, delta).value),
                &z,
            )?;
            let input = format!("delta={delta} c={} z={}", fmt_vec(&c), fmt_vec(&z));
            Ok((analytic, numeric, input))
        }
        _ => end_to_end(name, rng),
    }
}

fn random_model(mlp: bool, rng: &mut Rng) -> Model {
    let classes = 2 + rng.below(7);
    let dim = 1 + rng.below(5);
    if mlp {
        let mut m = Mlp::random(dim, 1 + rng.below(6), classes, rng);
        m.b1.iter_mut().for_each(|b| *b = 0.3 * rng.normal());
        m.b2.iter_mut().for_each(|b| *b = 0.3 * rng.normal());
        Model::Mlp(m)
    } else {
        Model::Linear(LinearSoftmax::random(classes, dim, 1.5, rng))
    }
}

/// Gradient of the batch-mean loss with respect to every model parameter.
fn end_to_end(name: &str, rng: &mut Rng) -> Result<Instance> {
    let (arch, loss) = name.split_once('_').expect("arch_loss name");
    let mut model = random_model(arch == "mlp", rng);
    let classes = model.classes();
    let n = 1 + rng.below(6);
    let x = Matrix::from_vec(n, model.input_dim(), (0..n * model.input_dim()).map(|_| rng.normal()).collect())?;

    let before = match loss {
        "em" => LossPlugin::em(),
        "dem" => LossPlugin::Dem(random_dem(rng)),
        _ => {
            let kind = [AdaDemKind::Full, AdaDemKind::NormOnly, AdaDemKind::MecOnly][rng.below(3)];
            let mut p = LossPlugin::adadem(classes, AdaDemVariant::of_kind(kind), adadem::DEFAULT_MOMENTUM)?;
            // move the calibrator off its uniform start
            let warm = Matrix::from_vec(8, classes, (0..8 * classes).map(|_| 2.0 * rng.normal()).collect())?;
            p.eval_batch(&warm, 0)?;
            p
        }
    };

    let z0 = model.forward(&x)?;
    let mut after = before.clone();
    let evals = after.eval_batch(&z0, 0)?;
    let mut dz = Matrix::zeros(n, classes);
    for (r, e) in evals.iter().enumerate() {
        dz.row_mut(r).copy_from_slice(&e.grad);
    }
    let analytic = model.backward(&x, &dz)?.flatten();

    let theta = model.flat_params();
    let numeric = fd(
        |t| {
            model.set_flat_params(t)?;
            let z = model.forward(&x)?;
            model::frozen_mean_loss(&after, &before, &z0, &z)
        },
        &theta,
    )?;
    let input = format!(
        "batch {n}x{} classes {classes} params={} logits={}",
        x.cols(),
        theta.len(),
        fmt_vec(z0.as_slice())
    );
    Ok((analytic, numeric, input))
}
