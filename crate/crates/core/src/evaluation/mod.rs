//! Streaming alarm simulation and scoring.
//!
//! An event is replayed at a fixed cadence; at each instant every station
//! gets a downward-closed set of alarmed levels and alarms latch. Each
//! (event, station, level) triple is then scored against the first time the
//! recorded trace reached the level threshold.

mod report;
mod stream;

use serde::Serialize;

pub use report::{level_reports, write_metrics_csv, write_summary_json, LevelReport, Summary};
pub use stream::{read_stream, stream_alarms, timeline_from_stream, write_stream, StreamAlarm};

use crate::datagen::{window_at, Catalog, DataError, EventRecord, StationBatch};
use crate::heads::AlarmSet;
use crate::model::{ModelError, SenseModel};

pub const DEFAULT_CADENCE: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cadence must be positive and finite, got {0}")]
    Cadence(f64),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("threshold grid must be a non-empty subset of (0, 1)")]
    Grid,
    #[error("expected {expected} decision thresholds, got {found}")]
    TauCount { expected: usize, found: usize },
    #[error("unknown event id {0}")]
    UnknownEvent(u64),
    #[error("stream line {line}: {detail}")]
    StreamFormat { line: usize, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Anything that maps a station batch to per-station level probabilities.
pub trait Predictor {
    fn window_samples(&self) -> usize;

    /// `[station][level]` probability that the level is reached.
    fn level_probabilities(&self, batch: &StationBatch, thresholds: &[f64]) -> Result<Vec<Vec<f64>>, ModelError>;
}

impl Predictor for SenseModel {
    fn window_samples(&self) -> usize {
        self.config.window_samples
    }

    fn level_probabilities(&self, batch: &StationBatch, thresholds: &[f64]) -> Result<Vec<Vec<f64>>, ModelError> {
        SenseModel::level_probabilities(self, batch, thresholds)
    }
}

/// Evaluation instants `cadence, 2*cadence, ...` up to `duration`.
pub fn instants(cadence: f64, duration: f64) -> Result<Vec<f64>> {
    if !(cadence.is_finite() && cadence > 0.0) {
        return Err(EvalError::Cadence(cadence));
    }
    let count = (duration / cadence + 1e-9).floor() as usize;
    Ok((1..=count).map(|k| k as f64 * cadence).collect())
}

/// Level probabilities of one event at every evaluation instant.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbTrace {
    pub event_id: u64,
    pub cadence: f64,
    pub times: Vec<f64>,
    /// `[instant][station][level]`.
    pub probs: Vec<Vec<Vec<f64>>>,
}

impl ProbTrace {
    /// Latching alarm times under cutoffs `tau`.
    pub fn timeline(&self, tau: &[f64]) -> AlarmTimeline {
        let n_stations = self.probs.first().map_or(0, Vec::len);
        let n_levels = tau.len();
        let mut alarms = vec![vec![None; n_levels]; n_stations];
        for (t, at) in self.times.iter().zip(&self.probs) {
            for (s, p) in at.iter().enumerate() {
                let set = AlarmSet::from_probs(p, tau);
                for (c, &on) in set.alarmed.iter().enumerate() {
                    if on && alarms[s][c].is_none() {
                        alarms[s][c] = Some(*t);
                    }
                }
            }
        }
        AlarmTimeline {
            event_id: self.event_id,
            cadence: self.cadence,
            alarms,
        }
    }
}

/// Runs `model` over `event` at every evaluation instant.
pub fn probability_trace<P: Predictor + ?Sized>(
    model: &P,
    catalog: &Catalog,
    event: &EventRecord,
    cadence: f64,
) -> Result<ProbTrace> {
    let times = instants(cadence, catalog.duration())?;
    let window = model.window_samples() as f64 / catalog.sample_rate;
    let probs = times
        .iter()
        .map(|&t| {
            let batch = window_at(catalog, event, t, window)?;
            Ok(model.level_probabilities(&batch, &catalog.thresholds)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbTrace {
        event_id: event.event_id,
        cadence,
        times,
        probs,
    })
}

/// Probability traces for every event of a catalog.
pub fn probability_traces<P: Predictor + ?Sized>(model: &P, catalog: &Catalog, cadence: f64) -> Result<Vec<ProbTrace>> {
    catalog
        .events
        .iter()
        .map(|e| probability_trace(model, catalog, e, cadence))
        .collect()
}

/// First alarm time per station and level for one event.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlarmTimeline {
    pub event_id: u64,
    pub cadence: f64,
    /// `[station][level]`.
    pub alarms: Vec<Vec<Option<f64>>>,
}

impl AlarmTimeline {
    pub fn is_empty(&self) -> bool {
        self.alarms.iter().flatten().all(Option::is_none)
    }

    /// At every instant the alarmed levels of each station form a prefix.
    pub fn is_downward_closed(&self) -> bool {
        self.alarms.iter().all(|row| {
            row.windows(2).all(|w| match (w[0], w[1]) {
                (_, None) => true,
                (Some(lo), Some(hi)) => lo <= hi,
                (None, Some(_)) => false,
            })
        })
    }
}

pub fn stream_predict<P: Predictor + ?Sized>(
    model: &P,
    catalog: &Catalog,
    event: &EventRecord,
    cadence: f64,
    tau: &[f64],
) -> Result<AlarmTimeline> {
    check_tau(tau, catalog.thresholds.len())?;
    Ok(probability_trace(model, catalog, event, cadence)?.timeline(tau))
}

fn check_tau(tau: &[f64], levels: usize) -> Result<()> {
    if tau.len() != levels {
        return Err(EvalError::TauCount {
            expected: levels,
            found: tau.len(),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    TrueNegative,
    FalseNegative,
}

/// An alarm counts only if it was issued strictly before the exceedance.
pub fn classify_outcome(alarm_time: Option<f64>, exceed_time: Option<f64>) -> Outcome {
    match (alarm_time, exceed_time) {
        (Some(a), Some(e)) if a < e => Outcome::TruePositive,
        (_, Some(_)) => Outcome::FalseNegative,
        (Some(_), None) => Outcome::FalsePositive,
        (None, None) => Outcome::TrueNegative,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::TruePositive => self.tp += 1,
            Outcome::FalsePositive => self.fp += 1,
            Outcome::TrueNegative => self.tn += 1,
            Outcome::FalseNegative => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn from_outcomes<'a>(outcomes: impl IntoIterator<Item = &'a Outcome>) -> Self {
        let mut c = Self::default();
        for &o in outcomes {
            c.add(o);
        }
        c
    }
}

/// Precision, recall and F1. `None` marks a zero denominator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Metrics { precision, recall, f1 }
}

/// Scored triples of one event: `[station][level]`.
pub fn event_outcomes(timeline: &AlarmTimeline, event: &EventRecord) -> Vec<Vec<Outcome>> {
    timeline
        .alarms
        .iter()
        .zip(&event.labels)
        .map(|(row, label)| {
            row.iter()
                .zip(&label.exceed_times)
                .map(|(&a, &e)| classify_outcome(a, e))
                .collect()
        })
        .collect()
}

/// Confusion counts per level over a set of events.
pub fn tally(timelines: &[AlarmTimeline], catalog: &Catalog) -> Result<Vec<ConfusionCounts>> {
    let mut counts = vec![ConfusionCounts::default(); catalog.thresholds.len()];
    for tl in timelines {
        let event = catalog.event(tl.event_id).ok_or(EvalError::UnknownEvent(tl.event_id))?;
        for row in event_outcomes(tl, event) {
            for (c, o) in row.into_iter().enumerate() {
                counts[c].add(o);
            }
        }
    }
    Ok(counts)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LeadStats {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

/// Mean, median and max of `leads`; `None` when empty.
pub fn lead_stats(leads: &[f64]) -> Option<LeadStats> {
    if leads.is_empty() {
        return None;
    }
    let mut sorted = leads.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Some(LeadStats {
        mean: sorted.iter().sum::<f64>() / n as f64,
        median,
        max: sorted[n - 1],
    })
}

/// Leading-time statistics per level over true positives.
pub fn leading_times(timelines: &[AlarmTimeline], catalog: &Catalog) -> Result<Vec<Option<LeadStats>>> {
    let levels = catalog.thresholds.len();
    let mut leads = vec![Vec::new(); levels];
    for tl in timelines {
        let event = catalog.event(tl.event_id).ok_or(EvalError::UnknownEvent(tl.event_id))?;
        for (row, label) in tl.alarms.iter().zip(&event.labels) {
            for c in 0..levels {
                if let (Some(a), Some(e)) = (row[c], label.exceed_times[c]) {
                    if classify_outcome(Some(a), Some(e)) == Outcome::TruePositive {
                        leads[c].push(e - a);
                    }
                }
            }
        }
    }
    Ok(leads.iter().map(|l| lead_stats(l)).collect())
}

/// `0.05, 0.10, ..., 0.95`.
pub fn default_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 / 20.0).collect()
}

/// Cutoffs maximizing validation F1 per level, chosen from the top level
/// down because a level's alarms also depend on the cutoffs above it. Ties,
/// including all-undefined F1, go to the larger cutoff.
pub fn sweep_thresholds(traces: &[ProbTrace], catalog: &Catalog, grid: &[f64]) -> Result<Vec<f64>> {
    if traces.is_empty() || catalog.events.is_empty() {
        return Err(EvalError::EmptyValidation);
    }
    if grid.is_empty() || grid.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(EvalError::Grid);
    }
    let levels = catalog.thresholds.len();
    let mut tau = vec![0.5; levels];
    for c in (0..levels).rev() {
        let mut best: Option<(f64, f64)> = None;
        for &candidate in grid {
            tau[c] = candidate;
            let timelines: Vec<AlarmTimeline> = traces.iter().map(|t| t.timeline(&tau)).collect();
            let score = metrics(&tally(&timelines, catalog)?[c]).f1.unwrap_or(-1.0);
            let better = match best {
                None => true,
                Some((s, t)) => score > s || (score == s && candidate > t),
            };
            if better {
                best = Some((score, candidate));
            }
        }
        tau[c] = best.expect("grid is non-empty").1;
    }
    Ok(tau)
}

/// Scores `traces` under `tau` against their catalog.
pub fn evaluate(traces: &[ProbTrace], catalog: &Catalog, tau: &[f64]) -> Result<Vec<LevelReport>> {
    check_tau(tau, catalog.thresholds.len())?;
    let timelines: Vec<AlarmTimeline> = traces.iter().map(|t| t.timeline(tau)).collect();
    let counts = tally(&timelines, catalog)?;
    let leads = leading_times(&timelines, catalog)?;
    Ok(level_reports(&catalog.thresholds, tau, &counts, &leads))
}
