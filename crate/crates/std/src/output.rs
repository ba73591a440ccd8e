//! Float formatting, CSV tables and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use demkit_core::bench::{MetricsReport, ProtocolReport, ShiftKind};
use demkit_core::losses::RewardPoint;
use demkit_core::search::{LrSweep, TrialResult};

use crate::error::{CliError, CliResult};

pub const REWARD_CURVE_HEADER: [&str; 3] = ["m", "p_max", "reward"];
pub const GRID_HEADER: [&str; 4] = ["tau", "alpha", "valid", "accuracy"];
pub const LR_SWEEP_HEADER: [&str; 3] = ["lr", "accuracy", "at_least_baseline"];
pub const METRICS_HEADER: [&str; 13] = [
    "shift",
    "kind",
    "level",
    "magnitude",
    "samples",
    "accuracy",
    "macro_f1",
    "marginal_entropy",
    "kl_output_vs_label",
    "avg_max_prob",
    "per_class_f1",
    "sorted_class_proportions",
    "prediction_marginal",
];

/// `%.9g`: nine significant digits, trailing zeros dropped, exponent form
/// below `1e-4` and from `1e9` up.
pub fn fmt_g(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs());
    }
    let decimals = (8 - exp) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Rounds to the value [`fmt_g`] prints, for JSON fields.
pub fn round9(x: f64) -> f64 {
    if x.is_finite() {
        fmt_g(x).parse().unwrap_or(x)
    } else {
        x
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|&x| fmt_g(x)).collect::<Vec<_>>().join(";")
}

fn csv_bytes<R>(header: &[&str], rows: R) -> Vec<u8>
where
    R: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    // writes into a Vec cannot fail
    w.write_record(header).expect("in-memory csv");
    for row in rows {
        w.write_record(&row).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

pub fn reward_curve_csv(points: &[RewardPoint]) -> Vec<u8> {
    csv_bytes(
        &REWARD_CURVE_HEADER,
        points.iter().map(|p| vec![fmt_g(p.m), fmt_g(p.p_max), fmt_g(p.reward)]),
    )
}

pub fn grid_csv(table: &[TrialResult]) -> Vec<u8> {
    csv_bytes(
        &GRID_HEADER,
        table.iter().map(|t| {
            vec![
                fmt_g(t.tau),
                fmt_g(t.alpha),
                t.valid.to_string(),
                t.accuracy.map(fmt_g).unwrap_or_default(),
            ]
        }),
    )
}

/// The baseline is the `lr = 0` row.
pub fn lr_sweep_csv(sweep: &LrSweep) -> Vec<u8> {
    let baseline = vec![fmt_g(0.0), fmt_g(sweep.baseline), "true".into()];
    let rows = sweep.points.iter().map(|p| {
        vec![
            fmt_g(p.lr),
            fmt_g(p.accuracy),
            (p.accuracy >= sweep.baseline).to_string(),
        ]
    });
    csv_bytes(&LR_SWEEP_HEADER, std::iter::once(baseline).chain(rows))
}

fn kind_name(kind: ShiftKind) -> &'static str {
    match kind {
        ShiftKind::Translate => "translate",
        ShiftKind::Rotate2d => "rotate2d",
        ShiftKind::FeatureNoise => "feature_noise",
        ShiftKind::FeatureScale => "feature_scale",
    }
}

fn metrics_cells(m: &MetricsReport) -> Vec<String> {
    vec![
        m.samples.to_string(),
        fmt_g(m.accuracy),
        fmt_g(m.macro_f1),
        fmt_g(m.marginal_entropy),
        fmt_g(m.kl_output_vs_label),
        fmt_g(m.avg_max_prob),
        join(&m.per_class_f1),
        join(&m.sorted_class_proportions),
        join(&m.prediction_marginal),
    ]
}

/// One row per shift, then an `overall` row with empty shift fields.
pub fn metrics_csv(report: &ProtocolReport) -> Vec<u8> {
    let shifts = report.shifts.iter().enumerate().map(|(i, s)| {
        let mut row = vec![
            i.to_string(),
            kind_name(s.shift.kind).to_string(),
            s.shift.level.to_string(),
            fmt_g(s.shift.magnitude),
        ];
        row.extend(metrics_cells(&s.metrics));
        row
    });
    let mut overall = vec!["overall".to_string(), String::new(), String::new(), String::new()];
    overall.extend(metrics_cells(&report.overall));
    csv_bytes(&METRICS_HEADER, shifts.chain(std::iter::once(overall)))
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn json_bytes(value: &serde_json::Value) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("json values always serialize");
    out.push(b'\n');
    out
}
