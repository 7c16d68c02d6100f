//! Recomputes metrics from a run directory and emits plot data.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

use super::artifacts::{CONFIG_FILE, TRACE_FILE};
use super::config::ExperimentConfig;
use super::metrics::{self, AccuracyMatrix};
use super::trace::{format_float, parse_trace, TraceRow};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub rounds: usize,
    pub num_tasks: usize,
    pub avg_accuracy: Option<f64>,
    pub forgetting: Option<f64>,
    pub files: Vec<String>,
}

/// Collapses sorted round indices into `a-b` ranges.
fn ranges(missing: &[usize]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < missing.len() {
        let start = missing[i];
        let mut end = start;
        while i + 1 < missing.len() && missing[i + 1] == end + 1 {
            i += 1;
            end = missing[i];
        }
        parts.push(if start == end { start.to_string() } else { format!("{start}-{end}") });
        i += 1;
    }
    parts.join(", ")
}

/// Rounds absent from `rows` out of `0..expected`.
pub fn missing_rounds(rows: &[TraceRow], expected: usize) -> Vec<usize> {
    let mut seen = vec![false; expected];
    for r in rows {
        if r.t < expected {
            seen[r.t] = true;
        }
    }
    (0..expected).filter(|&t| !seen[t]).collect()
}

/// Rebuilds the accuracy matrix from the last round of every task.
pub fn matrix_from_trace(rows: &[TraceRow], num_tasks: usize) -> Result<Option<AccuracyMatrix>> {
    let mut m = AccuracyMatrix::new(num_tasks);
    for s in 0..num_tasks {
        let Some(last) = rows.iter().filter(|r| r.task == s).max_by_key(|r| r.t) else {
            return Ok(None);
        };
        for j in 0..=s {
            match last.acc.get(j).copied().flatten() {
                Some(a) => m.set(s, j, a)?,
                None => return Ok(None),
            }
        }
    }
    Ok(Some(m))
}

fn write_dat(path: &Path, label: &str, points: impl Iterator<Item = (usize, f64)>) -> Result<()> {
    let mut text = format!("# t {label}\n");
    for (t, v) in points {
        text.push_str(&format!("{t} {}\n", format_float(v)));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Reads `trace.csv` (and `config.json` when present) from `run_dir`, checks
/// that no round is missing, and writes `report.json` plus two-column plot
/// files into `out_dir`.
pub fn report(run_dir: &Path, out_dir: &Path) -> Result<Report> {
    let text = fs::read_to_string(run_dir.join(TRACE_FILE))?;
    let (num_tasks, rows) = parse_trace(&text)?;
    let config_path = run_dir.join(CONFIG_FILE);
    let expected = if config_path.exists() {
        let cfg = ExperimentConfig::from_json(&fs::read_to_string(&config_path)?)?;
        cfg.num_tasks() * cfg.rounds
    } else {
        rows.iter().map(|r| r.t + 1).max().unwrap_or(0)
    };
    if expected == 0 {
        return Err(Error::IncompleteTrace("every round (trace is empty)".into()));
    }
    let missing = missing_rounds(&rows, expected);
    if !missing.is_empty() {
        return Err(Error::IncompleteTrace(format!(
            "rounds {} of 0-{} ({} of {expected})",
            ranges(&missing),
            expected - 1,
            missing.len()
        )));
    }

    let mut rows = rows;
    rows.sort_by_key(|r| r.t);
    let matrix = matrix_from_trace(&rows, num_tasks)?;
    let (avg_accuracy, forgetting) = match &matrix {
        Some(m) => (Some(metrics::avg_accuracy(m)?), if num_tasks >= 2 { Some(metrics::forgetting(m)?) } else { None }),
        None => (None, None),
    };

    fs::create_dir_all(out_dir)?;
    let mut files: Vec<PathBuf> = Vec::new();
    let gamma = out_dir.join("gamma.dat");
    write_dat(&gamma, "gamma", rows.iter().map(|r| (r.t, r.gamma)))?;
    files.push(gamma);
    let gamma_ad = out_dir.join("gamma_ad.dat");
    write_dat(&gamma_ad, "gamma_ad", rows.iter().map(|r| (r.t, r.gamma_ad)))?;
    files.push(gamma_ad);
    let grad_g = out_dir.join("grad_g_sq.dat");
    write_dat(&grad_g, "grad_g_sq", rows.iter().map(|r| (r.t, r.grad_g_sq)))?;
    files.push(grad_g);
    if matrix.is_some() {
        let acc = out_dir.join("avg_accuracy.dat");
        write_dat(
            &acc,
            "avg_accuracy",
            rows.iter().filter_map(|r| {
                let seen: Vec<f64> = r.acc.iter().flatten().copied().collect();
                (!seen.is_empty()).then(|| (r.t, seen.iter().sum::<f64>() / seen.len() as f64))
            }),
        )?;
        files.push(acc);
    }

    let report = Report {
        rounds: rows.len(),
        num_tasks,
        avg_accuracy,
        forgetting,
        files: files
            .iter()
            .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
            .collect(),
    };
    fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}
