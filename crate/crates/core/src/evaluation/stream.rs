use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{AlarmTimeline, EvalError, ProbTrace, Result};
use crate::heads::AlarmSet;

/// One alarm as it fires during a replay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamAlarm {
    pub t: f64,
    pub station: usize,
    /// One-based level index.
    pub level: usize,
    /// Probability of this level at the firing instant.
    pub probability: f64,
}

/// Alarms in firing order: by time, then station, then level.
pub fn stream_alarms(trace: &ProbTrace, tau: &[f64]) -> Vec<StreamAlarm> {
    let n_stations = trace.probs.first().map_or(0, Vec::len);
    let mut fired = vec![vec![false; tau.len()]; n_stations];
    let mut out = Vec::new();
    for (&t, at) in trace.times.iter().zip(&trace.probs) {
        for (s, p) in at.iter().enumerate() {
            let set = AlarmSet::from_probs(p, tau);
            for (c, &on) in set.alarmed.iter().enumerate() {
                if on && !fired[s][c] {
                    fired[s][c] = true;
                    out.push(StreamAlarm {
                        t,
                        station: s,
                        level: c + 1,
                        probability: p[c],
                    });
                }
            }
        }
    }
    out
}

/// Writes the alarm trace as CSV with header `t,station,level,probability`.
pub fn write_stream<W: Write>(out: W, trace: &ProbTrace, tau: &[f64]) -> std::io::Result<()> {
    let alarms = stream_alarms(trace, tau);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["t", "station", "level", "probability"])?;
    for a in alarms {
        w.serialize(a)?;
    }
    w.flush()
}

/// Parses the output of [`write_stream`].
pub fn read_stream<R: Read>(input: R) -> Result<Vec<StreamAlarm>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(|e| format_err(1, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["t", "station", "level", "probability"] {
        return Err(EvalError::StreamFormat {
            line: 1,
            detail: format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| format_err(i + 2, e)))
        .collect()
}

fn format_err(line: usize, e: csv::Error) -> EvalError {
    EvalError::StreamFormat {
        line,
        detail: e.to_string(),
    }
}

/// Rebuilds a timeline from parsed alarms, keeping the earliest per slot.
pub fn timeline_from_stream(
    event_id: u64,
    cadence: f64,
    alarms: &[StreamAlarm],
    n_stations: usize,
    n_levels: usize,
) -> Result<AlarmTimeline> {
    let mut grid = vec![vec![None; n_levels]; n_stations];
    for (i, a) in alarms.iter().enumerate() {
        if a.station >= n_stations || a.level == 0 || a.level > n_levels {
            return Err(EvalError::StreamFormat {
                line: i + 2,
                detail: format!("station {} level {} out of range", a.station, a.level),
            });
        }
        let slot: &mut Option<f64> = &mut grid[a.station][a.level - 1];
        if slot.is_none_or(|t| a.t < t) {
            *slot = Some(a.t);
        }
    }
    Ok(AlarmTimeline {
        event_id,
        cadence,
        alarms: grid,
    })
}
