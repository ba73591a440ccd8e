//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use demkit_core::bench::{MetricsReport, ProtocolReport};
use demkit_core::losses::{self, DemConfig, Direction};
use demkit_core::search::TrialResult;

use crate::config::ExperimentConfig;
use crate::error::{exit, CliError, CliResult};
use crate::experiment::Experiment;
use crate::gradcheck;
use crate::output::{self, fmt_g, round9};

/// Caps the worker threads used for grid points and lr sweeps.
pub const THREADS_ENV: &str = "DEMKIT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "demkit", version, about = "Entropy-minimization losses and test-time adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Reward of the dominant class along a one-hot logit ray.
    RewardCurve(RewardCurveArgs),
    /// Analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Adapt on the configured stream and report metrics.
    Run(ConfigArg),
    /// Score every valid (tau, alpha) on a labelled subset.
    GridSearch(ConfigArg),
    /// Accuracy at each configured learning rate against no adaptation.
    LrSweep(ConfigArg),
}

#[derive(Debug, Args)]
struct RewardCurveArgs {
    /// Number of classes.
    #[arg(long = "c", default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    tau: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    alpha: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    m_min: f64,
    #[arg(long, default_value_t = 30.0, allow_negative_numbers = true)]
    m_max: f64,
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    m_step: f64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Perturb one check's analytic gradient.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Debug, Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

/// [`run`] with explicit output streams.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    exit::OK
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    exit::USAGE
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => exit::OK,
        Err(e) => {
            let _ = writeln!(err, "demkit: {e}");
            e.exit_code()
        }
    }
}

fn parse_threads(raw: &str) -> CliResult<usize> {
    raw.trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))
}

/// Builds the global rayon pool from [`THREADS_ENV`], if set.
pub fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n = parse_threads(&raw)?;
    // a pool already built by an embedding program is left alone
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult<()> {
    init_threads()?;
    match cmd {
        Command::RewardCurve(a) => reward_curve(a, out),
        Command::Gradcheck(a) => gradcheck_cmd(a, out),
        Command::Run(a) => run_cmd(&a.config, out),
        Command::GridSearch(a) => grid_search_cmd(&a.config, out),
        Command::LrSweep(a) => lr_sweep_cmd(&a.config, out),
    }
}

fn say(out: &mut dyn Write, line: &str) {
    let _ = writeln!(out, "{line}");
}

fn reward_curve(a: RewardCurveArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = DemConfig::new(a.tau, a.alpha, Direction::Minimize).map_err(CliError::from_validation)?;
    if a.classes < 2 {
        return Err(CliError::Usage(format!("--c must be at least 2, got {}", a.classes)));
    }
    let grid = losses::linspace_step(a.m_min, a.m_max, a.m_step).map_err(CliError::from_validation)?;
    let points = losses::reward_curve(a.classes, &cfg, &grid).map_err(CliError::from_runtime)?;
    let csv = output::reward_curve_csv(&points);
    match a.out {
        Some(path) => {
            output::write_atomic(&path, &csv)?;
            say(out, &format!("reward-curve: {} points -> {}", points.len(), path.display()));
        }
        None => {
            let _ = out.write_all(&csv);
        }
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    if let Some(name) = &a.corrupt {
        if !gradcheck::CHECKS.contains(&name.as_str()) {
            return Err(CliError::Usage(format!("unknown check {name:?}")));
        }
    }
    let reports = gradcheck::run_suite(a.seed, a.trials, a.corrupt.as_deref()).map_err(CliError::from_runtime)?;
    for r in &reports {
        say(out, &format!(
            "{:<18} max_rel_err={:<16} instances={}",
            r.name,
            fmt_g(r.max_rel_err),
            r.instances
        ));
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} (max_rel_err={}) at {}", r.name, fmt_g(r.max_rel_err), r.worst_input))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed: {}", failed.join("; "))))
    }
}

fn load(path: &Path) -> CliResult<(ExperimentConfig, Experiment)> {
    let cfg = ExperimentConfig::load(path)?;
    let exp = Experiment::from_config(&cfg)?;
    Ok((cfg, exp))
}

fn metrics_json(m: &MetricsReport) -> serde_json::Value {
    let v = |xs: &[f64]| xs.iter().map(|&x| round9(x)).collect::<Vec<_>>();
    json!({
        "samples": m.samples,
        "accuracy": round9(m.accuracy),
        "macro_f1": round9(m.macro_f1),
        "marginal_entropy": round9(m.marginal_entropy),
        "kl_output_vs_label": round9(m.kl_output_vs_label),
        "avg_max_prob": round9(m.avg_max_prob),
        "per_class_f1": v(&m.per_class_f1),
        "sorted_class_proportions": v(&m.sorted_class_proportions),
        "prediction_marginal": v(&m.prediction_marginal),
    })
}

fn report_json(r: &ProtocolReport) -> serde_json::Value {
    json!({
        "overall": metrics_json(&r.overall),
        "shifts": r.shifts.iter().map(|s| metrics_json(&s.metrics)).collect::<Vec<_>>(),
    })
}

fn run_cmd(path: &Path, out: &mut dyn Write) -> CliResult<()> {
    let (cfg, exp) = load(path)?;
    let source = exp.source_model()?;
    let (report, baseline) = exp.run(&source)?;
    let dir = &cfg.output_dir;
    let model_json = serde_json::to_vec_pretty(&source).expect("models serialize");
    output::write_atomic(&dir.join("source_model.json"), &model_json)?;
    output::write_atomic(&dir.join("metrics.csv"), &output::metrics_csv(&report))?;
    let summary = json!({
        "command": "run",
        "seed": cfg.seed,
        "loss": cfg.loss,
        "lr": round9(exp.sgd.lr),
        "accuracy": round9(report.overall.accuracy),
        "mean_accuracy": round9(report.mean_accuracy()),
        "baseline_accuracy": round9(baseline.overall.accuracy),
        "adapted": report_json(&report),
        "baseline": report_json(&baseline),
    });
    output::write_atomic(&dir.join("summary.json"), &output::json_bytes(&summary))?;
    say(out, &format!(
        "run: accuracy={} baseline={} shifts={} -> {}",
        fmt_g(report.overall.accuracy),
        fmt_g(baseline.overall.accuracy),
        report.shifts.len(),
        dir.display()
    ));
    Ok(())
}

fn trial_json(t: &TrialResult) -> serde_json::Value {
    json!({
        "tau": round9(t.tau),
        "alpha": round9(t.alpha),
        "subset_accuracy": t.accuracy.map(round9),
    })
}

fn grid_search_cmd(path: &Path, out: &mut dyn Write) -> CliResult<()> {
    let (cfg, exp) = load(path)?;
    let source = exp.source_model()?;
    let g = exp.grid_search(&source)?;
    let mut ranked: Vec<&TrialResult> = g.table.iter().filter(|t| t.accuracy.is_some()).collect();
    // stable sort keeps grid order among ties
    ranked.sort_by(|a, b| b.accuracy.partial_cmp(&a.accuracy).expect("finite accuracies"));
    let top: Vec<serde_json::Value> = ranked.into_iter().take(5).map(trial_json).collect();
    let dir = &cfg.output_dir;
    output::write_atomic(&dir.join("grid.csv"), &output::grid_csv(&g.table))?;
    let summary = json!({
        "command": "grid-search",
        "seed": cfg.seed,
        "lr": round9(exp.sgd.lr),
        "evaluated": g.table.iter().filter(|t| t.valid).count(),
        "best": {
            "tau": round9(g.best.tau),
            "alpha": round9(g.best.alpha),
            "subset_accuracy": g.best.accuracy.map(round9),
            "full_accuracy": round9(g.best_full_accuracy),
        },
        "classical": {
            "tau": 1.0,
            "alpha": 1.0,
            "subset_accuracy": round9(g.classical.subset),
            "full_accuracy": round9(g.classical.full),
        },
        "top": top,
    });
    output::write_atomic(&dir.join("grid_summary.json"), &output::json_bytes(&summary))?;
    say(out, &format!(
        "grid-search: best tau={} alpha={} subset_accuracy={} (classical {}) -> {}",
        fmt_g(g.best.tau),
        fmt_g(g.best.alpha),
        fmt_g(g.best.accuracy.unwrap_or(f64::NAN)),
        fmt_g(g.classical.subset),
        dir.display()
    ));
    Ok(())
}

fn lr_sweep_cmd(path: &Path, out: &mut dyn Write) -> CliResult<()> {
    let (cfg, exp) = load(path)?;
    let source = exp.source_model()?;
    let sweep = exp.lr_sweep(&source, &exp.plugin)?;
    let dir = &cfg.output_dir;
    output::write_atomic(&dir.join("lr_sweep.csv"), &output::lr_sweep_csv(&sweep))?;
    let best = sweep.best().expect("non-empty lr list");
    let summary = json!({
        "command": "lr-sweep",
        "seed": cfg.seed,
        "loss": cfg.loss,
        "baseline_accuracy": round9(sweep.baseline),
        "tolerance_count": sweep.tolerance_count(),
        "best_lr": round9(best.lr),
        "best_accuracy": round9(best.accuracy),
        "points": sweep
            .points
            .iter()
            .map(|p| json!({"lr": round9(p.lr), "accuracy": round9(p.accuracy)}))
            .collect::<Vec<_>>(),
    });
    output::write_atomic(&dir.join("lr_sweep_summary.json"), &output::json_bytes(&summary))?;
    say(out, &format!(
        "lr-sweep: baseline={} tolerant={}/{} best lr={} accuracy={} -> {}",
        fmt_g(sweep.baseline),
        sweep.tolerance_count(),
        sweep.points.len(),
        fmt_g(best.lr),
        fmt_g(best.accuracy),
        dir.display()
    ));
    Ok(())
}
