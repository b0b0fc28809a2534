use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::waveform::{first_exceed_times, peak_abs, synth_waveform, WaveformRequest};
use super::{
    validate_thresholds, Catalog, DataError, EventRecord, Hypocenter, Result, StationLabel, StationMeta,
    TAIWAN_THRESHOLDS,
};

pub const P_VELOCITY: f64 = 6.0;
pub const S_VELOCITY: f64 = 3.5;
pub const KM_PER_DEGREE: f64 = 111.195;

/// `log10(PGA[%g]) = a + b*M - c*log10(R + d) + N(0, sigma)`, R in km.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Attenuation {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub sigma: f64,
}

pub const ATTENUATION: Attenuation = Attenuation {
    a: -1.2,
    b: 0.6,
    c: 1.6,
    d: 10.0,
    sigma: 0.1,
};

impl Attenuation {
    /// Median log10 PGA without the noise term.
    pub fn log10_pga(&self, magnitude: f64, distance_km: f64) -> f64 {
        self.a + self.b * magnitude - self.c * (distance_km + self.d).log10()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionBox {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl Default for RegionBox {
    fn default() -> Self {
        Self {
            lon_min: 121.0,
            lon_max: 121.6,
            lat_min: 23.5,
            lat_max: 24.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_stations: usize,
    pub n_events: usize,
    pub region: RegionBox,
    pub magnitude_range: (f64, f64),
    pub depth_range_km: (f64, f64),
    pub station_height_range: (f64, f64),
    pub seed: u64,
    pub sample_rate: f64,
    pub duration: f64,
    pub thresholds: Vec<f64>,
    /// Mean gap between consecutive origin times, seconds.
    pub mean_interevent: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_stations: 16,
            n_events: 200,
            region: RegionBox::default(),
            magnitude_range: (4.0, 7.5),
            depth_range_km: (5.0, 40.0),
            station_height_range: (0.0, 1500.0),
            seed: 0,
            sample_rate: 100.0,
            duration: 30.0,
            thresholds: TAIWAN_THRESHOLDS.to_vec(),
            mean_interevent: 3600.0,
        }
    }
}

impl GenConfig {
    pub fn n_samples(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.region;
        let finite = [r.lon_min, r.lon_max, r.lat_min, r.lat_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || r.lon_min >= r.lon_max || r.lat_min >= r.lat_max {
            return Err(DataError::EmptyRegion(format!("{r:?}")));
        }
        if r.lon_min < -180.0 || r.lon_max > 180.0 || r.lat_min < -90.0 || r.lat_max > 90.0 {
            return Err(DataError::InvalidConfig(format!(
                "region {r:?} exceeds valid coordinates"
            )));
        }
        let bad = |msg: String| Err(DataError::InvalidConfig(msg));
        if self.n_stations == 0 {
            return bad("n_stations must be at least 1".into());
        }
        if !(self.sample_rate > 0.0 && self.duration > 0.0)
            || !self.sample_rate.is_finite()
            || !self.duration.is_finite()
        {
            return bad("sample_rate and duration must be positive".into());
        }
        let samples = self.duration * self.sample_rate;
        if (samples - samples.round()).abs() > 1e-9 {
            return bad(format!(
                "duration * sample_rate = {samples} is not an integer sample count"
            ));
        }
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.magnitude_range) || !ordered(self.depth_range_km) || !ordered(self.station_height_range) {
            return bad("magnitude, depth and height ranges must be ordered pairs".into());
        }
        if self.depth_range_km.0 < 0.0 {
            return bad("depth must be non-negative".into());
        }
        if !(self.mean_interevent > 0.0 && self.mean_interevent.is_finite()) {
            return bad("mean_interevent must be positive".into());
        }
        validate_thresholds(&self.thresholds)?;
        let worst = self.worst_case_distance();
        let s_arrival = worst / S_VELOCITY;
        if s_arrival >= self.duration {
            return Err(DataError::Geometry {
                s_arrival,
                duration: self.duration,
            });
        }
        Ok(())
    }

    /// Largest hypocentral distance any station/event pair can reach.
    fn worst_case_distance(&self) -> f64 {
        let r = &self.region;
        let lat_extreme = r.lat_min.abs().min(r.lat_max.abs());
        let cos = if r.lat_min <= 0.0 && r.lat_max >= 0.0 {
            1.0
        } else {
            lat_extreme.to_radians().cos()
        };
        let dx = (r.lon_max - r.lon_min) * KM_PER_DEGREE * cos;
        let dy = (r.lat_max - r.lat_min) * KM_PER_DEGREE;
        let dz = self.depth_range_km.1 + self.station_height_range.1.max(0.0) / 1000.0;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// Straight-line distance in km from hypocenter to a station, using a local
/// equirectangular projection at the pair's mean latitude.
pub fn hypocentral_distance(h: &Hypocenter, s: &StationMeta) -> f64 {
    let mean_lat = 0.5 * (h.latitude + s.latitude);
    let dx = (s.longitude - h.longitude) * KM_PER_DEGREE * mean_lat.to_radians().cos();
    let dy = (s.latitude - h.latitude) * KM_PER_DEGREE;
    let dz = h.depth_km + s.height / 1000.0;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Deterministically synthesizes a catalog from `cfg`.
pub fn generate_catalog(cfg: &GenConfig) -> Result<Catalog> {
    cfg.validate()?;
    let n_samples = cfg.n_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = cfg.region;

    let mut stations: Vec<StationMeta> = Vec::with_capacity(cfg.n_stations);
    while stations.len() < cfg.n_stations {
        let s = StationMeta {
            station_id: stations.len(),
            longitude: uniform(&mut rng, (r.lon_min, r.lon_max)),
            latitude: uniform(&mut rng, (r.lat_min, r.lat_max)),
            height: uniform(&mut rng, cfg.station_height_range),
        };
        let collides = stations
            .iter()
            .any(|o| (o.longitude - s.longitude).abs() < 1e-4 && (o.latitude - s.latitude).abs() < 1e-4);
        if !collides {
            stations.push(s);
        }
    }

    let gap = Exp::new(1.0 / cfg.mean_interevent).map_err(|e| DataError::InvalidConfig(e.to_string()))?;
    let noise = Normal::new(0.0, ATTENUATION.sigma).expect("positive sigma");
    let mut origin_time = 0.0;
    let mut events = Vec::with_capacity(cfg.n_events);
    for k in 0..cfg.n_events {
        origin_time += 1.0 + gap.sample(&mut rng);
        let hypocenter = Hypocenter {
            longitude: uniform(&mut rng, (r.lon_min, r.lon_max)),
            latitude: uniform(&mut rng, (r.lat_min, r.lat_max)),
            depth_km: uniform(&mut rng, cfg.depth_range_km),
        };
        let magnitude = uniform(&mut rng, cfg.magnitude_range);
        let targets: Vec<(f64, f64)> = stations
            .iter()
            .map(|s| {
                let dist = hypocentral_distance(&hypocenter, s);
                let log_pga = ATTENUATION.log10_pga(magnitude, dist) + noise.sample(&mut rng);
                (dist, 10f64.powf(log_pga))
            })
            .collect();

        let mut trace_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        trace_rng.set_stream(k as u64 + 1);
        let mut traces = Vec::with_capacity(cfg.n_stations * 3 * n_samples);
        let mut labels = Vec::with_capacity(cfg.n_stations);
        for (station_id, &(dist, pga)) in targets.iter().enumerate() {
            let p_arrival = dist / P_VELOCITY;
            let s_arrival = dist / S_VELOCITY;
            let trace = synth_waveform(
                &WaveformRequest {
                    pga,
                    p_arrival,
                    s_arrival,
                    sample_rate: cfg.sample_rate,
                    n_samples,
                },
                &mut trace_rng,
            )?;
            labels.push(StationLabel {
                station_id,
                max_pga: peak_abs(&trace),
                exceed_times: first_exceed_times(&trace, n_samples, cfg.sample_rate, &cfg.thresholds),
                p_arrival: Some(p_arrival),
                s_arrival: Some(s_arrival),
            });
            traces.extend_from_slice(&trace);
        }
        events.push(EventRecord {
            event_id: k as u64,
            origin_time,
            hypocenter,
            magnitude,
            labels,
            traces: Arc::from(traces),
        });
    }

    let catalog = Catalog {
        stations,
        events,
        sample_rate: cfg.sample_rate,
        n_samples,
        thresholds: cfg.thresholds.clone(),
    };
    catalog.validate()?;
    Ok(catalog)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn law_matches_hand_evaluation() {
        // -1.2 + 0.6 * 5 - 1.6 * log10(20)
        let hand = 1.8 - 1.6 * 1.301_029_995_663_981_2;
        assert!((ATTENUATION.log10_pga(5.0, 10.0) - hand).abs() < 1e-12);
    }

    #[test]
    fn default_geometry_fits_record() {
        GenConfig::default().validate().unwrap();
    }

    #[test]
    fn oversized_region_is_rejected() {
        let cfg = GenConfig {
            region: RegionBox {
                lon_min: 120.0,
                lon_max: 122.0,
                lat_min: 22.0,
                lat_max: 25.0,
            },
            ..GenConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(DataError::Geometry { .. })));
    }
}
