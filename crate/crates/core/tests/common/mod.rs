#![allow(dead_code)]

pub mod oracles;

use numcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sense::datagen::StationBatch;
use sense::model::ModelConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// A batch covering every station of `cfg` with random traces in %g.
pub fn random_batch(cfg: &ModelConfig, seed: u64) -> StationBatch {
    let mut r = rng(seed);
    let n = cfg.n_stations;
    StationBatch {
        waveforms: uniform(&mut r, &[n, 3, cfg.window_samples], -5.0, 5.0),
        coords: (0..n)
            .map(|_| {
                [
                    r.random_range(121.0..121.6),
                    r.random_range(23.5..24.0),
                    r.random_range(0.0..1500.0),
                ]
            })
            .collect(),
        station_ids: (0..n).collect(),
        t_now: 10.0,
    }
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
