use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::rollout::mean;

use super::metrics::{write_csv, MetricsRecord};

/// Share of final steps the terminal statistics average over.
pub const TAIL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub run: String,
    /// Mean step reward over the final 20% of steps.
    pub final_reward: f64,
    /// `|mean H_theta - mean H_ref|` over the final 20% of steps.
    pub entropy_drift: f64,
    pub mean_kl: f64,
    /// Trapezoidal area under the reward curve divided by the step span.
    pub auc: f64,
}

fn tail(records: &[MetricsRecord]) -> &[MetricsRecord] {
    let n = ((records.len() as f64 * TAIL_FRACTION).ceil() as usize).max(1);
    &records[records.len() - n..]
}

pub fn summarize(run: &str, records: &[MetricsRecord]) -> Result<CompareRow> {
    if records.is_empty() {
        return Err(Error::arg(format!("run {run} has no steps")));
    }
    let t = tail(records);
    let field = |rs: &[MetricsRecord], f: fn(&MetricsRecord) -> f64| mean(&rs.iter().map(f).collect::<Vec<_>>());
    let auc = if records.len() == 1 {
        records[0].mean_reward
    } else {
        let area: f64 = records
            .windows(2)
            .map(|w| 0.5 * (w[0].mean_reward + w[1].mean_reward) * (w[1].step - w[0].step) as f64)
            .sum();
        area / (records[records.len() - 1].step - records[0].step) as f64
    };
    Ok(CompareRow {
        run: run.to_string(),
        final_reward: field(t, |r| r.mean_reward),
        entropy_drift: (field(t, |r| r.entropy) - field(t, |r| r.ref_entropy)).abs(),
        mean_kl: field(records, |r| r.kl),
        auc,
    })
}

/// Summaries of runs sharing one step grid.
pub fn compare_runs(runs: &[(String, Vec<MetricsRecord>)]) -> Result<Vec<CompareRow>> {
    if runs.len() < 2 {
        return Err(Error::arg("compare needs at least two runs"));
    }
    let grid: Vec<usize> = runs[0].1.iter().map(|r| r.step).collect();
    for (name, recs) in &runs[1..] {
        if recs.iter().map(|r| r.step).ne(grid.iter().copied()) {
            return Err(Error::arg(format!("run {name} has a different step grid than {}", runs[0].0)));
        }
    }
    runs.iter().map(|(n, r)| summarize(n, r)).collect()
}

/// Plain-text table with differences against the first run.
pub fn format_report(rows: &[CompareRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<24} {:>12} {:>13} {:>10} {:>10}", "run", "final_reward", "entropy_drift", "mean_kl", "auc");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<24} {:>12.6} {:>13.6} {:>10.6} {:>10.6}",
            r.run, r.final_reward, r.entropy_drift, r.mean_kl, r.auc
        );
    }
    if let Some(base) = rows.first() {
        let _ = writeln!(s, "\ndifference vs {}:", base.run);
        for r in &rows[1..] {
            let _ = writeln!(
                s,
                "{:<24} {:>+12.6} {:>+13.6} {:>+10.6} {:>+10.6}",
                r.run,
                r.final_reward - base.final_reward,
                r.entropy_drift - base.entropy_drift,
                r.mean_kl - base.mean_kl,
                r.auc - base.auc
            );
        }
    }
    s
}

pub fn write_report(csv_path: &Path, text_path: &Path, rows: &[CompareRow]) -> Result<()> {
    write_csv(csv_path, rows)?;
    std::fs::write(text_path, format_report(rows))?;
    Ok(())
}
