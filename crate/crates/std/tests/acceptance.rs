//! Acceptance criteria 1 to 13. Every test prints one `CRITERION n PASS|FAIL`
//! line to the real stdout (bypassing the harness capture) and then asserts.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use demkit::config::{ExperimentConfig, LossName};
use demkit::experiment::Experiment;
use demkit::gradcheck;
use demkit_core::adadem::{self, AdaDemKind, AdaDemVariant, DeltaSource, MecState, NormKind};
use demkit_core::bench::{kl_divergence, ProtocolReport, ShiftKind, StreamMode, KL_SMOOTHING};
use demkit_core::losses::{self, DemConfig, Direction, Logits};
use demkit_core::model::{LossPlugin, Model};
use demkit_core::numkit::{log_softmax, rel_err, softmax, Rng};
use demkit_core::search::DEFAULT_LRS;

const SEEDS: [u64; 3] = [1, 2, 3];

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("CRITERION {n:>2} {}: {detail}", if pass { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stdout().lock(), "{line}");
    assert!(pass, "{line}");
}

fn random_logits(rng: &mut Rng, classes: usize) -> Vec<f64> {
    let scale = rng.uniform(0.1, 10.0);
    (0..classes).map(|_| scale * rng.normal()).collect()
}

fn lg(z: &[f64]) -> Logits {
    Logits::from_slice(z).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_01_decomposition_identity() {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let c = 2 + rng.below(49);
        let z = random_logits(&mut rng, c);
        // entropy straight from log-probabilities
        let h: f64 = -log_softmax(&z).unwrap().iter().map(|&lp| lp.exp() * lp).sum::<f64>();
        let l = lg(&z);
        worst = worst.max((h - (losses::cadf(&l) + losses::gmc(&l))).abs());
    }
    let took = start.elapsed();
    verdict(
        1,
        worst <= 1e-9 && took < Duration::from_secs(1),
        &format!("max |H - (T + Q)| = {worst:.3e} over 10000 vectors in {took:.2?}"),
    );
}

#[test]
fn criterion_02_gradient_oracles() {
    let start = Instant::now();
    let reports = gradcheck::run_suite(2024, 1000, None).unwrap();
    let took = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let all = reports.iter().all(|r| r.passed() && r.instances >= 1000);
    let names: Vec<&str> = reports.iter().map(|r| r.name).collect();
    verdict(
        2,
        all && took < Duration::from_secs(30),
        &format!(
            "max rel err {worst:.3e} < 1e-5 over {} checks x 1000 ({}) in {took:.2?}",
            reports.len(),
            names.join(" ")
        ),
    );
}

#[test]
fn criterion_03_detached_form() {
    let mut rng = Rng::new(303);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c = 2 + rng.below(49);
        let l = lg(&random_logits(&mut rng, c));
        let a = losses::detached_em_eval(&l).grad;
        let b = losses::em_eval(&l, Direction::Minimize).grad;
        worst = a.iter().zip(&b).map(|(x, y)| rel_err(*x, *y)).fold(worst, f64::max);
    }
    verdict(3, worst <= 1e-12, &format!("max gradient gap {worst:.3e} over 1000 inputs"));
}

#[test]
fn criterion_04_dem_degeneracy() {
    let mut rng = Rng::new(404);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c = 2 + rng.below(49);
        let l = lg(&random_logits(&mut rng, c));
        let dem = losses::dem_eval(&l, &DemConfig::classical()).unwrap();
        let em = losses::em_eval(&l, Direction::Minimize);
        worst = worst.max(rel_err(dem.value, em.value));
        worst = dem.grad.iter().zip(&em.grad).map(|(x, y)| rel_err(*x, *y)).fold(worst, f64::max);
    }
    verdict(4, worst <= 1e-12, &format!("DEM(1,1) vs EM max gap {worst:.3e} (value and grad)"));
}

#[test]
fn criterion_05_validity_bound() {
    let mut disagreements = 0;
    let mut worst_fd = 0.0f64;
    let mut points = 0;
    for &c in &[2usize, 10, 100] {
        for ti in 1..=60 {
            for ai in 1..=40 {
                let (tau, alpha) = (ti as f64 * 0.05, ai as f64 * 0.05);
                points += 1;
                let curv = losses::boundary_second_derivative(tau, alpha, c).unwrap();
                if losses::validate_config(tau, alpha) != (curv <= 1e-12) {
                    disagreements += 1;
                }
                // the tempered term varies on a z/τ scale
                let h = 1e-3 * tau.min(1.0);
                let value = |z: &[f64]| {
                    losses::cadf_tempered_eval(&lg(z), tau).unwrap().value + alpha * losses::gmc(&lg(z))
                };
                let mut plus = vec![0.0; c];
                let mut minus = vec![0.0; c];
                plus[0] = h;
                minus[0] = -h;
                let fd = (value(&plus) - 2.0 * value(&vec![0.0; c]) + value(&minus)) / (h * h);
                worst_fd = worst_fd.max((fd - curv).abs());
            }
        }
    }
    verdict(
        5,
        disagreements == 0 && worst_fd <= 1e-4,
        &format!("{disagreements} sign disagreements over {points} points; max |second difference - formula| = {worst_fd:.3e}"),
    );
}

#[test]
fn criterion_06_reward_collapse() {
    let c = 10;
    let em = DemConfig::classical();
    // p_max = e^m / (e^m + C - 1)
    let m_at = |p: f64| ((c - 1) as f64 * p / (1.0 - p)).ln();
    let reward_at = |cfg: &DemConfig, m: f64| losses::reward_curve(c, cfg, &[m]).unwrap()[0].reward;
    let r_uniform = reward_at(&em, 0.0);
    let r_confident = reward_at(&em, m_at(0.9999));
    let grid = losses::linspace_step(0.0, 30.0, 0.1).unwrap();
    let peak = losses::reward_curve(c, &em, &grid)
        .unwrap()
        .iter()
        .map(|p| p.reward)
        .fold(f64::NEG_INFINITY, f64::max);
    let warm = DemConfig::new(1.5, 1.0, Direction::Minimize).unwrap();
    let (r15, r10) = (reward_at(&warm, m_at(0.99)), reward_at(&em, m_at(0.99)));
    let ends = r_uniform.abs() < 1e-6 && r_confident.abs() < 1e-6;
    verdict(
        6,
        ends && peak > 0.1 && r15 > r10,
        &format!(
            "EM reward at p_max=1/C {r_uniform:.3e}, at p_max=0.9999 {r_confident:.3e} (need < 1e-6 at both); \
             interior max {peak:.4}; at p_max=0.99 tau=1.5 {r15:.4e} vs tau=1 {r10:.4e}"
        ),
    );
}

fn random_simplex(rng: &mut Rng, c: usize) -> Vec<f64> {
    softmax(&random_logits(rng, c)).unwrap()
}

#[test]
fn criterion_07_calibrator_ema() {
    let c = 5;
    let mut rng = Rng::new(707);
    let start: Vec<f64> = (0..c).flat_map(|_| random_simplex(&mut rng, c)).collect();
    let targets: Vec<Vec<f64>> = (0..c).map(|_| random_simplex(&mut rng, c)).collect();
    let mut state = MecState::from_parts(c, 0.1, 0, start.clone()).unwrap();
    let gap0: Vec<f64> = (0..c)
        .map(|k| (0..c).map(|i| (start[k * c + i] - targets[k][i]).abs()).fold(0.0, f64::max))
        .collect();
    let mut worst = 0.0f64;
    for t in 1..=50 {
        // two samples per row whose mean is the row's target
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for (k, q) in targets.iter().enumerate() {
            let j = (k + 1) % c;
            let d = 0.5 * q[j].min(q[k]);
            let mut a = q.clone();
            let mut b = q.clone();
            a[j] -= d;
            a[k] += d;
            b[j] += d;
            b[k] -= d;
            probs.push(a);
            probs.push(b);
            labels.extend([k, k]);
        }
        state.update(&probs, &labels).unwrap();
        for (k, q) in targets.iter().enumerate() {
            let gap = state.row(k).iter().zip(q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max((gap - 0.9f64.powi(t) * gap0[k]).abs());
        }
    }

    let mut state = MecState::with_momentum(c, 0.1).unwrap();
    let mut simplex_err = 0.0f64;
    for _ in 0..10_000 {
        let n = 1 + rng.below(8);
        let probs: Vec<Vec<f64>> = (0..n).map(|_| random_simplex(&mut rng, c)).collect();
        let labels: Vec<usize> = probs.iter().map(|p| adadem::pseudo_label(p)).collect();
        state.update(&probs, &labels).unwrap();
        for k in 0..c {
            let row = state.row(k);
            simplex_err = simplex_err.max((row.iter().sum::<f64>() - 1.0).abs());
            simplex_err = simplex_err.max(-row.iter().cloned().fold(0.0, f64::min));
        }
    }
    verdict(
        7,
        worst <= 1e-12 && simplex_err <= 1e-9,
        &format!("max |gap_t - 0.9^t gap_0| = {worst:.3e} for t <= 50; simplex error {simplex_err:.3e} after 10000 updates"),
    );
}

#[test]
fn criterion_08_delta() {
    let mut exact = true;
    for c in 2..=200 {
        for offset in [0.0, 0.7, -3.0, 1e3] {
            let d = adadem::delta(&lg(&vec![offset; c]), NormKind::L1, DeltaSource::Cadf).unwrap();
            exact &= d == 1.0;
        }
    }
    let mut rng = Rng::new(808);
    let variant = AdaDemVariant::of_kind(AdaDemKind::NormOnly);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c = 2 + rng.below(30);
        let rows: Vec<Logits> = (0..4).map(|_| lg(&random_logits(&mut rng, c))).collect();
        let mut state = MecState::new(c).unwrap();
        let evals = adadem::adadem_eval(&rows, &mut state, &variant, Direction::Minimize).unwrap();
        for (z, e) in rows.iter().zip(&evals) {
            let d = adadem::delta(z, NormKind::L1, DeltaSource::Cadf).unwrap().max(adadem::DELTA_FLOOR);
            let em = losses::em_eval(z, Direction::Minimize).grad;
            worst = e.grad.iter().zip(&em).map(|(g, h)| rel_err(g * d, *h)).fold(worst, f64::max);
        }
    }
    verdict(
        8,
        exact && worst <= 1e-12,
        &format!("delta(uniform) == 1 exactly for C in 2..=200: {exact}; norm_only grad x delta vs EM max gap {worst:.3e}"),
    );
}

// ---- desk-scale experiments ----

fn experiment(seed: u64, edit: impl FnOnce(&mut ExperimentConfig)) -> Experiment {
    let mut cfg = ExperimentConfig {
        seed,
        ..Default::default()
    };
    edit(&mut cfg);
    Experiment::from_config(&cfg).unwrap()
}

fn adadem_plugin(classes: usize) -> LossPlugin {
    LossPlugin::adadem(classes, AdaDemVariant::default(), adadem::DEFAULT_MOMENTUM).unwrap()
}

/// Reports at every lr of the standard grid plus the `lr = 0` baseline.
struct Sweep {
    baseline: ProtocolReport,
    runs: Vec<(f64, ProtocolReport)>,
}

impl Sweep {
    fn new(exp: &Experiment, source: &Model, plugin: &LossPlugin) -> Self {
        let mut lrs = vec![0.0];
        lrs.extend(DEFAULT_LRS);
        let mut reports: Vec<ProtocolReport> =
            lrs.par_iter().map(|&lr| exp.run_with(source, plugin, lr).unwrap()).collect();
        let baseline = reports.remove(0);
        Sweep {
            baseline,
            runs: DEFAULT_LRS.iter().copied().zip(reports).collect(),
        }
    }

    /// Highest overall accuracy; the smallest lr wins ties.
    fn best(&self) -> &(f64, ProtocolReport) {
        self.runs
            .iter()
            .reduce(|a, b| if b.1.overall.accuracy > a.1.overall.accuracy { b } else { a })
            .unwrap()
    }
}

fn sweeps_for(edit: fn(&mut ExperimentConfig)) -> Vec<(Experiment, Model, Sweep, Sweep)> {
    SEEDS
        .par_iter()
        .map(|&seed| {
            let exp = experiment(seed, edit);
            let source = exp.source_model().unwrap();
            let em = Sweep::new(&exp, &source, &LossPlugin::em());
            let ada = Sweep::new(&exp, &source, &adadem_plugin(exp.mixture.classes));
            (exp, source, em, ada)
        })
        .collect()
}

fn noise_level_four(cfg: &mut ExperimentConfig) {
    cfg.stream.shifts[0].kind = ShiftKind::FeatureNoise;
    cfg.stream.shifts[0].level = 4;
}

fn default_single(_: &mut ExperimentConfig) {}

fn default_continual(cfg: &mut ExperimentConfig) {
    let mut shifts = cfg.stream.shifts[0];
    cfg.stream.mode = StreamMode::Continual;
    cfg.stream.shifts = [3, 4, 5]
        .iter()
        .map(|&level| {
            shifts.level = level;
            shifts
        })
        .collect();
}

fn continual_sweeps() -> &'static Vec<(Experiment, Model, Sweep, Sweep)> {
    static CELL: OnceLock<Vec<(Experiment, Model, Sweep, Sweep)>> = OnceLock::new();
    CELL.get_or_init(|| sweeps_for(default_continual))
}

#[test]
fn criterion_09_easy_class_bias() {
    let start = Instant::now();
    let sweeps = sweeps_for(noise_level_four);
    let classes = sweeps[0].0.mixture.classes;
    assert_eq!(sweeps[0].0.stream.batches_per_shift, 100);
    let uniform = vec![1.0 / classes as f64; classes];
    let kl = |s: &Sweep| kl_divergence(&s.best().1.overall.prediction_marginal, &uniform, KL_SMOOTHING);
    let em: Vec<f64> = sweeps.iter().map(|s| kl(&s.2)).collect();
    let ada: Vec<f64> = sweeps.iter().map(|s| kl(&s.3)).collect();
    let (me, ma) = (median(em.clone()), median(ada.clone()));
    let took = start.elapsed();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4e}")).collect::<Vec<_>>().join(" ");
    verdict(
        9,
        ma <= 0.5 * me && took < Duration::from_secs(120),
        &format!(
            "median KL(marginal || uniform) at best lr: AdaDEM {ma:.4e} vs EM {me:.4e} (ratio {:.3}, need <= 0.5); \
             per seed EM [{}] AdaDEM [{}] best lr EM [{}] AdaDEM [{}]; {took:.1?}",
            ma / me,
            fmt(&em),
            fmt(&ada),
            fmt(&sweeps.iter().map(|s| s.2.best().0).collect::<Vec<_>>()),
            fmt(&sweeps.iter().map(|s| s.3.best().0).collect::<Vec<_>>()),
        ),
    );
}

/// Learning rates where the seed-mean accuracy is at least the seed-mean
/// baseline.
fn tolerant_lrs(sweeps: &[&Sweep]) -> usize {
    let n = sweeps.len() as f64;
    let base = sweeps.iter().map(|s| s.baseline.overall.accuracy).sum::<f64>() / n;
    (0..DEFAULT_LRS.len())
        .filter(|&i| sweeps.iter().map(|s| s.runs[i].1.overall.accuracy).sum::<f64>() / n >= base)
        .count()
}

#[test]
fn criterion_10_lr_robustness() {
    let sweeps = sweeps_for(default_single);
    let em = tolerant_lrs(&sweeps.iter().map(|s| &s.2).collect::<Vec<_>>());
    let ada = tolerant_lrs(&sweeps.iter().map(|s| &s.3).collect::<Vec<_>>());
    let per_seed = |pick: fn(&(Experiment, Model, Sweep, Sweep)) -> &Sweep| {
        sweeps
            .iter()
            .map(|s| tolerant_lrs(&[pick(s)]).to_string())
            .collect::<Vec<_>>()
            .join("/")
    };
    verdict(
        10,
        ada > em,
        &format!(
            "lrs with seed-mean accuracy >= no-adapt baseline: AdaDEM {ada}/10 vs EM {em}/10 (need strictly more); \
             per seed EM {} AdaDEM {}",
            per_seed(|s| &s.2),
            per_seed(|s| &s.3),
        ),
    );
}

#[test]
fn criterion_11_grid_search_contract() {
    let sweeps = continual_sweeps();
    let mut by_construction = true;
    let mut selected = Vec::new();
    let mut em_full = Vec::new();
    let mut picks = Vec::new();
    for (exp, source, em, _) in sweeps {
        let (lr, em_best) = em.best();
        let at_lr = Experiment {
            sgd: demkit_core::model::SgdConfig { lr: *lr, ..exp.sgd },
            ..exp.clone()
        };
        let g = at_lr.grid_search(source).unwrap();
        by_construction &= g.best.accuracy.unwrap() >= g.classical.subset;
        selected.push(g.best_full_accuracy);
        em_full.push(em_best.overall.accuracy);
        picks.push(format!("({}, {})", g.best.tau, g.best.alpha));
    }
    let (ms, me) = (median(selected.clone()), median(em_full.clone()));
    verdict(
        11,
        by_construction && ms >= me - 0.005,
        &format!(
            "subset best >= (1,1) on every seed: {by_construction}; median full accuracy DEM* {ms:.4} vs EM {me:.4} \
             (need >= EM - 0.005); picks {}",
            picks.join(" ")
        ),
    );
}

#[test]
fn criterion_12_adadem_vs_em() {
    let sweeps = continual_sweeps();
    let em: Vec<f64> = sweeps.iter().map(|s| s.2.best().1.mean_accuracy()).collect();
    let ada: Vec<f64> = sweeps.iter().map(|s| s.3.best().1.mean_accuracy()).collect();
    let (me, ma) = (median(em.clone()), median(ada.clone()));
    verdict(
        12,
        ma >= me,
        &format!("median final mean accuracy at own best lr: AdaDEM {ma:.4} vs EM {me:.4}; per seed EM {em:.4?} AdaDEM {ada:.4?}"),
    );
}

fn demkit(args: &[&str], threads: &str) -> Vec<u8> {
    let o = Command::new(env!("CARGO_BIN_EXE_demkit"))
        .args(args)
        .env("DEMKIT_THREADS", threads)
        .output()
        .unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o.stdout
}

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn criterion_13_determinism() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        seed: 13,
        ..Default::default()
    };
    default_continual(&mut cfg);
    cfg.stream.batches_per_shift = 20;
    cfg.search.step = 0.25;
    cfg.loss.name = LossName::Adadem;
    let config = root.path().join("config.json");
    let mut runs = Vec::new();
    for (attempt, threads) in ["1", "1", "4"].iter().enumerate() {
        let out = root.path().join(format!("out{attempt}"));
        cfg.output_dir = out.clone();
        std::fs::write(&config, serde_json::to_vec(&cfg).unwrap()).unwrap();
        let c = config.to_str().unwrap();
        let curve = out.join("curve.csv");
        let mut stdout = demkit(&["reward-curve", "--tau", "1.5", "--out", curve.to_str().unwrap()], threads);
        stdout.clear();
        stdout.extend(demkit(&["gradcheck", "--seed", "13", "--trials", "50"], threads));
        for cmd in ["run", "grid-search", "lr-sweep"] {
            demkit(&[cmd, "--config", c], threads);
        }
        runs.push((stdout, outputs(&out)));
    }
    let csvs = runs[0].1.iter().filter(|(n, _)| n.ends_with(".csv")).count();
    let same = runs.iter().all(|r| *r == runs[0]);
    verdict(
        13,
        same && csvs == 4,
        &format!(
            "reward-curve, gradcheck, run, grid-search and lr-sweep re-run 3 times (threads 1, 1, 4): \
             {csvs} CSVs and {} other files byte-identical: {same}",
            runs[0].1.len() - csvs
        ),
    );
}
