//! Plain-text tables and output directories.

use std::fmt::Write as _;
use std::path::Path;

use super::runner::{BenchmarkReport, GuReport, RunFailure, SweepReport};
use crate::error::Result;
use crate::telemetry::emit::{write_deltas_file, write_json_file, write_steps_file, write_text_file};
use crate::telemetry::Aggregate;

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn stats(a: Option<&Aggregate>) -> [String; 4] {
    match a {
        Some(a) => [pct(a.std), pct(a.mean), pct(a.max), format!("{:.2}", a.failed_fraction)],
        None => ["-".into(), "-".into(), "-".into(), "-".into()],
    }
}

fn failures_block(out: &mut String, failures: &[RunFailure]) {
    if failures.is_empty() {
        return;
    }
    let _ = writeln!(out, "\nFailed runs ({}):", failures.len());
    for f in failures {
        let _ = writeln!(out, "  {}: {}", f.run_id, f.error);
    }
}

/// Approaches down, tasks across; Std/Mean/Max in percent and the failed-run
/// fraction per task.
pub fn render_benchmark(report: &BenchmarkReport) -> String {
    let mut tasks: Vec<(&str, String)> = Vec::new();
    let mut approaches: Vec<&str> = Vec::new();
    for c in &report.cells {
        if !tasks.iter().any(|(t, _)| *t == c.task) {
            tasks.push((&c.task, format!("{} ({})", c.task, c.metric)));
        }
        if !approaches.contains(&c.approach.as_str()) {
            approaches.push(&c.approach);
        }
    }
    let name_w = approaches.iter().map(|a| a.len()).max().unwrap_or(0).max(8);
    let cell_w = 30;
    let mut out = String::new();
    let _ = write!(out, "{:name_w$}", "Approach");
    for (_, title) in &tasks {
        let _ = write!(out, " | {title:^cell_w$}");
    }
    out.push('\n');
    let _ = write!(out, "{:name_w$}", "");
    for _ in &tasks {
        let _ = write!(out, " | {:>7}{:>8}{:>8}{:>7}", "Std", "Mean", "Max", "Fail");
    }
    out.push('\n');
    for a in &approaches {
        let _ = write!(out, "{a:name_w$}");
        for (t, _) in &tasks {
            let [s, m, x, f] = stats(report.cell(a, t).and_then(|c| c.aggregate.as_ref()));
            let _ = write!(out, " | {s:>7}{m:>8}{x:>8}{f:>7}");
        }
        out.push('\n');
    }
    failures_block(&mut out, &report.failures);
    out
}

/// One row per clipping threshold.
pub fn render_sweep(report: &SweepReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Task {} ({})", report.task, report.metric);
    let _ = writeln!(out, "{:>10} | {:>7}{:>8}{:>8}{:>7}", "Threshold", "Std", "Mean", "Max", "Fail");
    for r in &report.rows {
        let [s, m, x, f] = stats(r.aggregate.as_ref());
        let _ = writeln!(out, "{:>10} | {s:>7}{m:>8}{x:>8}{f:>7}", r.threshold);
    }
    failures_block(&mut out, &report.bench.failures);
    out
}

/// Per-iteration mean and std of each method.
pub fn render_gu(report: &GuReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Task {} ({})", report.task, report.metric);
    let _ = writeln!(out, "{:>11} | {:>9} | {:>3} | {:>7} {:>7}", "Method", "Iteration", "n", "Mean", "Std");
    for p in &report.trajectory {
        let it = if p.iteration < 0 { "final".to_string() } else { p.iteration.to_string() };
        let _ = writeln!(
            out,
            "{:>11} | {:>9} | {:>3} | {:>7} {:>7}",
            p.method,
            it,
            p.n,
            pct(p.mean),
            pct(p.std)
        );
    }
    failures_block(&mut out, &report.failures);
    out
}

pub fn write_benchmark(dir: &Path, report: &BenchmarkReport) -> Result<()> {
    write_json_file(&dir.join("runs.json"), &report.runs())?;
    write_json_file(&dir.join("aggregate.json"), &report.aggregates())?;
    write_steps_file(&dir.join("steps.csv"), &report.steps)?;
    write_deltas_file(&dir.join("deltas.csv"), &report.deltas)?;
    write_text_file(&dir.join("report.txt"), &render_benchmark(report))
}

pub fn write_sweep(dir: &Path, report: &SweepReport) -> Result<()> {
    write_json_file(&dir.join("runs.json"), &report.bench.runs())?;
    write_json_file(&dir.join("aggregate.json"), &report.rows)?;
    write_steps_file(&dir.join("steps.csv"), &report.bench.steps)?;
    write_deltas_file(&dir.join("deltas.csv"), &report.bench.deltas)?;
    write_text_file(&dir.join("report.txt"), &render_sweep(report))
}

pub fn write_gu(dir: &Path, report: &GuReport) -> Result<()> {
    let finals: Vec<_> = report.finals.iter().filter_map(|c| c.summary()).collect();
    write_json_file(&dir.join("runs.json"), &report.runs())?;
    write_json_file(&dir.join("aggregate.json"), &finals)?;
    write_json_file(&dir.join("trajectory.json"), &report.trajectory)?;
    write_steps_file(&dir.join("steps.csv"), &report.steps)?;
    write_deltas_file(&dir.join("deltas.csv"), &report.deltas)?;
    write_text_file(&dir.join("report.txt"), &render_gu(report))
}
