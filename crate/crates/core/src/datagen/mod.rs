//! Synthetic multistation earthquake catalogs, the on-disk dataset format,
//! chronological splitting and time-windowed model inputs.

mod catalog;
mod format;
mod split;
mod waveform;
mod window;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use catalog::{
    generate_catalog, hypocentral_distance, Attenuation, GenConfig, RegionBox, ATTENUATION, KM_PER_DEGREE, P_VELOCITY,
    S_VELOCITY,
};
pub use format::{read_dataset, write_dataset, FORMAT_VERSION};
pub use split::split_catalog;
pub use waveform::{first_exceed_times, peak_abs, synth_waveform, WaveformRequest, NOISE_SIGMA};
pub use window::{window_at, StationBatch};

/// Percent-of-g thresholds for the five Taiwan intensity levels.
pub const TAIWAN_THRESHOLDS: [f64; 5] = [0.81, 2.5, 8.1, 14.0, 25.0];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("region box is empty: {0}")]
    EmptyRegion(String),
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
    #[error("thresholds must be finite, positive and strictly ascending: {0:?}")]
    Thresholds(Vec<f64>),
    #[error("S arrival at up to {s_arrival:.3} s does not fit in a {duration} s record")]
    Geometry { s_arrival: f64, duration: f64 },
    #[error("need at least 3 events to split, got {0}")]
    TooFewEvents(usize),
    #[error("split ratios must be positive and sum to 1: {0:?}")]
    Ratios((f64, f64, f64)),
    #[error("window length must be positive and finite, got {0}")]
    WindowLength(f64),
    #[error("t_now {t_now} outside [0, {duration}]")]
    TimeOutOfRange { t_now: f64, duration: f64 },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed json: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("unsupported dataset format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },
    #[error("event {event_id}: trace file holds {found} bytes, expected {expected}")]
    TraceLength {
        event_id: u64,
        expected: usize,
        found: usize,
    },
    #[error("event {event_id}: {found} station entries, manifest lists {expected}")]
    StationCount {
        event_id: u64,
        expected: usize,
        found: usize,
    },
    #[error("inconsistent catalog: {0}")]
    Inconsistent(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationMeta {
    pub station_id: usize,
    pub longitude: f64,
    pub latitude: f64,
    /// Instrument height in meters.
    pub height: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypocenter {
    pub longitude: f64,
    pub latitude: f64,
    pub depth_km: f64,
}

/// Ground truth for one station of one event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationLabel {
    pub station_id: usize,
    /// Peak absolute acceleration over the three components, %g.
    pub max_pga: f64,
    /// Seconds after origin of the first sample reaching each threshold.
    pub exceed_times: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_arrival: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_arrival: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub event_id: u64,
    /// Seconds on the catalog timeline.
    pub origin_time: f64,
    pub hypocenter: Hypocenter,
    pub magnitude: f64,
    pub labels: Vec<StationLabel>,
    /// Station-major, then component, then time: `N * 3 * T` values in %g.
    pub traces: Arc<[f32]>,
}

impl EventRecord {
    /// The `3 * T` block of one station.
    pub fn station_trace(&self, station: usize, n_samples: usize) -> &[f32] {
        let len = 3 * n_samples;
        &self.traces[station * len..(station + 1) * len]
    }

    /// Earliest P arrival across stations, if arrivals are known.
    pub fn first_p_arrival(&self) -> Option<f64> {
        self.labels.iter().filter_map(|l| l.p_arrival).min_by(f64::total_cmp)
    }

    pub fn last_s_arrival(&self) -> Option<f64> {
        self.labels.iter().filter_map(|l| l.s_arrival).max_by(f64::total_cmp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    pub stations: Vec<StationMeta>,
    pub events: Vec<EventRecord>,
    pub sample_rate: f64,
    /// Samples per trace.
    pub n_samples: usize,
    /// Intensity-level thresholds in %g, strictly ascending.
    pub thresholds: Vec<f64>,
}

impl Catalog {
    pub fn n_stations(&self) -> usize {
        self.stations.len()
    }

    pub fn duration(&self) -> f64 {
        self.n_samples as f64 / self.sample_rate
    }

    pub fn event(&self, event_id: u64) -> Option<&EventRecord> {
        self.events.iter().find(|e| e.event_id == event_id)
    }

    /// Checks every structural invariant of the catalog.
    pub fn validate(&self) -> Result<()> {
        validate_thresholds(&self.thresholds)?;
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) || self.n_samples == 0 {
            return Err(DataError::Inconsistent(format!(
                "sample_rate {} and n_samples {} must be positive",
                self.sample_rate, self.n_samples
            )));
        }
        for (i, s) in self.stations.iter().enumerate() {
            if s.station_id != i {
                return Err(DataError::Inconsistent(format!(
                    "station ids must be dense, found {} at position {i}",
                    s.station_id
                )));
            }
            if !(s.latitude.abs() <= 90.0 && s.longitude.abs() <= 180.0 && s.height.is_finite()) {
                return Err(DataError::Inconsistent(format!("station {i} has invalid coordinates")));
            }
        }
        let n = self.stations.len();
        for (k, e) in self.events.iter().enumerate() {
            if k > 0 && self.events[k - 1].origin_time >= e.origin_time {
                return Err(DataError::Inconsistent(format!(
                    "event {} is not strictly after its predecessor",
                    e.event_id
                )));
            }
            if e.labels.len() != n {
                return Err(DataError::StationCount {
                    event_id: e.event_id,
                    expected: n,
                    found: e.labels.len(),
                });
            }
            if e.traces.len() != n * 3 * self.n_samples {
                return Err(DataError::TraceLength {
                    event_id: e.event_id,
                    expected: n * 3 * self.n_samples * 4,
                    found: e.traces.len() * 4,
                });
            }
            for (i, l) in e.labels.iter().enumerate() {
                if l.station_id != i || l.exceed_times.len() != self.thresholds.len() {
                    return Err(DataError::Inconsistent(format!(
                        "event {} station entry {i} is malformed",
                        e.event_id
                    )));
                }
                if !(l.max_pga >= 0.0 && l.max_pga.is_finite()) {
                    return Err(DataError::Inconsistent(format!(
                        "event {} station {i} has max_pga {}",
                        e.event_id, l.max_pga
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn validate_thresholds(thresholds: &[f64]) -> Result<()> {
    let ok = !thresholds.is_empty()
        && thresholds.iter().all(|t| t.is_finite() && *t > 0.0)
        && thresholds.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(DataError::Thresholds(thresholds.to_vec()))
    }
}
