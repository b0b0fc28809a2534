use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, Result};

/// Standard deviation of the background noise, %g.
pub const NOISE_SIGMA: f64 = 0.001;

const P_FREQ: f64 = 6.0;
const P_RISE: f64 = 0.25;
const P_RELATIVE: f64 = 0.3;
const S_FREQ: f64 = 2.5;
const S_RISE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaveformRequest {
    /// Target peak absolute acceleration, %g.
    pub pga: f64,
    /// Seconds after origin.
    pub p_arrival: f64,
    pub s_arrival: f64,
    pub sample_rate: f64,
    pub n_samples: usize,
}

/// Peaks at 1 when `t == rise`, zero before onset.
fn envelope(t: f64, rise: f64) -> f64 {
    if t < 0.0 {
        0.0
    } else {
        (t / rise) * (1.0 - t / rise).exp()
    }
}

struct Phase {
    onset: f64,
    freq: f64,
    rise: f64,
    amplitude: [f64; 3],
    offset: [f64; 3],
}

impl Phase {
    fn value(&self, c: usize, t: f64) -> f64 {
        let dt = t - self.onset;
        if dt < 0.0 {
            return 0.0;
        }
        self.amplitude[c] * envelope(dt, self.rise) * (2.0 * PI * self.freq * dt + self.offset[c]).sin()
    }
}

/// Renders a three-component trace (vertical, north, east) laid out
/// component-major. The clean P+S signal is scaled so its peak equals
/// `req.pga`, then Gaussian noise is added.
pub fn synth_waveform<R: Rng>(req: &WaveformRequest, rng: &mut R) -> Result<Vec<f32>> {
    let duration = req.n_samples as f64 / req.sample_rate;
    let in_record = |t: f64| t.is_finite() && (0.0..duration).contains(&t);
    if !in_record(req.p_arrival) || !in_record(req.s_arrival) || req.p_arrival > req.s_arrival {
        return Err(DataError::InvalidConfig(format!(
            "arrivals P {} S {} outside [0, {duration})",
            req.p_arrival, req.s_arrival
        )));
    }
    if !(req.pga.is_finite() && req.pga >= 0.0) {
        return Err(DataError::InvalidConfig(format!("pga {} is invalid", req.pga)));
    }
    let mut phase = |onset, freq, rise, weights: [f64; 3]| {
        let mut amplitude = [0.0; 3];
        let mut offset = [0.0; 3];
        for c in 0..3 {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            amplitude[c] = sign * weights[c];
            offset[c] = rng.random_range(0.0..2.0 * PI);
        }
        Phase {
            onset,
            freq,
            rise,
            amplitude,
            offset,
        }
    };
    let p = phase(
        req.p_arrival,
        P_FREQ,
        P_RISE,
        [P_RELATIVE, 0.5 * P_RELATIVE, 0.5 * P_RELATIVE],
    );
    let s = phase(req.s_arrival, S_FREQ, S_RISE, [0.4, 1.0, 0.9]);

    let n = req.n_samples;
    let mut clean = vec![0.0f64; 3 * n];
    for c in 0..3 {
        for i in 0..n {
            let t = i as f64 / req.sample_rate;
            clean[c * n + i] = p.value(c, t) + s.value(c, t);
        }
    }
    let peak = clean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { req.pga / peak } else { 0.0 };
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    Ok(clean.iter().map(|v| (v * gain + noise.sample(rng)) as f32).collect())
}

/// Largest absolute sample of a trace, widened to f64.
pub fn peak_abs(trace: &[f32]) -> f64 {
    trace.iter().fold(0.0f64, |m, v| m.max(f64::from(v.abs())))
}

/// First sample time at which any component reaches each threshold.
pub fn first_exceed_times(trace: &[f32], n_samples: usize, sample_rate: f64, thresholds: &[f64]) -> Vec<Option<f64>> {
    let components: Vec<&[f32]> = trace.chunks(n_samples).collect();
    let mut per_sample = vec![0.0f64; n_samples];
    for comp in &components {
        for (m, v) in per_sample.iter_mut().zip(comp.iter()) {
            *m = m.max(f64::from(v.abs()));
        }
    }
    thresholds
        .iter()
        .map(|&thr| {
            per_sample
                .iter()
                .position(|&v| v >= thr)
                .map(|i| i as f64 / sample_rate)
        })
        .collect()
}
