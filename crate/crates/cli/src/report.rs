//! CSV outputs of a run.

use std::path::Path;

use splitserve_core::ledger::Category;

use crate::harness::{policy_name, RunReport};
use crate::HarnessError;

pub const CLIENTS_CSV: &str = "clients.csv";
pub const EXECUTOR_CSV: &str = "executor.csv";
pub const LEDGER_CSV: &str = "ledger.csv";
pub const SUMMARY_CSV: &str = "summary.csv";

/// Writes every CSV of `report` into `dir`.
pub fn write_all(report: &RunReport, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    write_clients(report, &dir.join(CLIENTS_CSV))?;
    write_executor(report, &dir.join(EXECUTOR_CSV))?;
    write_ledgers(report, &dir.join(LEDGER_CSV))?;
    write_summary(report, &dir.join(SUMMARY_CSV))?;
    Ok(())
}

/// One row per client iteration record.
pub fn write_clients(report: &RunReport, path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "variant", "policy", "client", "name", "iteration", "phase", "tokens", "started_us", "latency_us", "tokens_per_s", "loss",
    ])?;
    for (vi, v) in report.variants.iter().enumerate() {
        for j in &v.jobs {
            for r in &j.records {
                let secs = r.latency.as_secs_f64();
                let rate = if secs > 0.0 { r.tokens as f64 / secs } else { 0.0 };
                w.write_record([
                    vi.to_string(),
                    policy_name(v.policy).to_string(),
                    j.id.to_string(),
                    j.name.clone(),
                    r.iteration.to_string(),
                    format!("{:?}", r.phase).to_lowercase(),
                    r.tokens.to_string(),
                    r.started.as_micros().to_string(),
                    r.latency.as_micros().to_string(),
                    format!("{rate:.1}"),
                    r.loss.map(|l| format!("{l:.6}")).unwrap_or_default(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Batch-size and wait-time histograms plus totals, per variant.
pub fn write_executor(report: &RunReport, path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "policy", "metric", "key", "value"])?;
    for (vi, v) in report.variants.iter().enumerate() {
        for [m, k, val] in v.executor.metrics.csv_rows() {
            w.write_record([vi.to_string(), policy_name(v.policy).to_string(), m, k, val])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Final and peak bytes per component and category.
pub fn write_ledgers(report: &RunReport, path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "policy", "component", "category", "bytes", "peak_bytes", "timestamp_ms"])?;
    for (vi, v) in report.variants.iter().enumerate() {
        let ledgers = std::iter::once(&v.executor.ledger).chain(v.jobs.iter().filter_map(|j| j.ledger.as_ref()));
        for l in ledgers {
            for c in Category::ALL {
                w.write_record([
                    vi.to_string(),
                    policy_name(v.policy).to_string(),
                    l.owner.to_string(),
                    c.to_string(),
                    l.get(c).to_string(),
                    l.peaks.get(&c).copied().unwrap_or(0).to_string(),
                    l.timestamp_ms.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary(report: &RunReport, path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "variant", "policy", "clock", "clients", "failures", "mean_batch_size", "tokens", "elapsed_s", "tokens_per_s",
    ])?;
    for (vi, v) in report.variants.iter().enumerate() {
        w.write_record([
            vi.to_string(),
            policy_name(v.policy).to_string(),
            format!("{:?}", v.clock).to_lowercase(),
            v.jobs.len().to_string(),
            v.failures().to_string(),
            format!("{:.4}", v.executor.metrics.mean_batch_size()),
            v.tokens().to_string(),
            format!("{:.6}", v.elapsed_us as f64 * 1e-6),
            format!("{:.1}", v.throughput()),
        ])?;
    }
    w.flush()?;
    Ok(())
}
