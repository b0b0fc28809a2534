use numcore::Tensor;

use super::{Catalog, DataError, EventRecord, Result};

/// Model input for one event at one instant: every station of the network.
#[derive(Clone, Debug)]
pub struct StationBatch {
    /// `[N, 3, W]`, %g, right-aligned at `t_now`.
    pub waveforms: Tensor,
    /// (longitude, latitude, height) per station.
    pub coords: Vec<[f64; 3]>,
    pub station_ids: Vec<usize>,
    pub t_now: f64,
}

impl StationBatch {
    pub fn n_stations(&self) -> usize {
        self.station_ids.len()
    }

    pub fn window_samples(&self) -> usize {
        self.waveforms.shape()[2]
    }
}

/// Number of samples recorded up to and including `t_now`.
pub(crate) fn observed_samples(t_now: f64, sample_rate: f64, n_samples: usize) -> usize {
    let last = (t_now * sample_rate + 1e-9).floor() as usize;
    (last + 1).min(n_samples)
}

/// Cuts the `window_len`-second window ending at `t_now` out of every station
/// trace. Samples before the record start are zero.
pub fn window_at(catalog: &Catalog, event: &EventRecord, t_now: f64, window_len: f64) -> Result<StationBatch> {
    if !(window_len.is_finite() && window_len > 0.0) {
        return Err(DataError::WindowLength(window_len));
    }
    let width = (window_len * catalog.sample_rate).round() as usize;
    if width == 0 {
        return Err(DataError::WindowLength(window_len));
    }
    let duration = catalog.duration();
    if !(0.0..=duration).contains(&t_now) {
        return Err(DataError::TimeOutOfRange { t_now, duration });
    }
    let t = catalog.n_samples;
    let n = catalog.n_stations();
    let end = observed_samples(t_now, catalog.sample_rate, t);
    let start = end as isize - width as isize;
    let copy_from = start.max(0) as usize;
    let pad = (copy_from as isize - start) as usize;
    let mut data = vec![0.0f32; n * 3 * width];
    for s in 0..n {
        let trace = event.station_trace(s, t);
        for c in 0..3 {
            let src = &trace[c * t + copy_from..c * t + end];
            let dst = (s * 3 + c) * width + pad;
            data[dst..dst + src.len()].copy_from_slice(src);
        }
    }
    Ok(StationBatch {
        waveforms: Tensor::new(vec![n, 3, width], data).expect("consistent window shape"),
        coords: catalog
            .stations
            .iter()
            .map(|s| [s.longitude, s.latitude, s.height])
            .collect(),
        station_ids: (0..n).collect(),
        t_now,
    })
}

#[cfg(test)]
mod tests {
    use super::observed_samples;

    #[test]
    fn observed_count_includes_current_sample() {
        assert_eq!(observed_samples(0.0, 100.0, 3000), 1);
        assert_eq!(observed_samples(0.07, 100.0, 3000), 8);
        assert_eq!(observed_samples(30.0, 100.0, 3000), 3000);
    }
}
