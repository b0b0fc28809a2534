use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::{metrics, ConfusionCounts, EvalError, LeadStats, Metrics, Result};

/// Scores of one intensity level.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelReport {
    /// One-based level index.
    pub level: usize,
    /// Level threshold in %g.
    pub threshold: f64,
    pub tau: f64,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    pub leading_time: Option<LeadStats>,
}

pub fn level_reports(
    thresholds: &[f64],
    tau: &[f64],
    counts: &[ConfusionCounts],
    leads: &[Option<LeadStats>],
) -> Vec<LevelReport> {
    (0..thresholds.len())
        .map(|c| LevelReport {
            level: c + 1,
            threshold: thresholds[c],
            tau: tau[c],
            counts: counts[c],
            metrics: metrics(&counts[c]),
            leading_time: leads[c],
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub split: String,
    pub head: String,
    pub n_events: usize,
    pub n_stations: usize,
    pub cadence: f64,
    pub levels: Vec<LevelReport>,
}

const UNDEFINED: &str = "undefined";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| x.to_string())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One row per level; zero denominators and missing lead times are written
/// as `undefined`.
pub fn write_metrics_csv<W: Write>(out: W, levels: &[LevelReport]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "level",
        "threshold",
        "tau",
        "precision",
        "recall",
        "f1",
        "tp",
        "fp",
        "tn",
        "fn",
        "lead_mean",
        "lead_median",
        "lead_max",
    ])?;
    for r in levels {
        let lead = r.leading_time;
        w.write_record([
            r.level.to_string(),
            r.threshold.to_string(),
            r.tau.to_string(),
            cell(r.metrics.precision),
            cell(r.metrics.recall),
            cell(r.metrics.f1),
            r.counts.tp.to_string(),
            r.counts.fp.to_string(),
            r.counts.tn.to_string(),
            r.counts.fn_.to_string(),
            cell(lead.map(|l| l.mean)),
            cell(lead.map(|l| l.median)),
            cell(lead.map(|l| l.max)),
        ])?;
    }
    w.flush()
}

pub fn write_summary_json(path: &Path, summary: &Summary) -> Result<()> {
    let json = serde_json::to_string_pretty(summary).expect("summary serializes");
    std::fs::write(path, json + "\n").map_err(io_err(path))
}
