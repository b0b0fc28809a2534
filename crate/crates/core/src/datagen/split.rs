use super::{Catalog, DataError, Result};

/// Event-based chronological split: the first `floor(n * train)` events go to
/// train, the next `floor(n * val)` to validation, the rest to test.
pub fn split_catalog(catalog: &Catalog, ratios: (f64, f64, f64)) -> Result<(Catalog, Catalog, Catalog)> {
    let (train, val, test) = ratios;
    let valid =
        [train, val, test].iter().all(|r| r.is_finite() && *r > 0.0) && (train + val + test - 1.0).abs() <= 1e-9;
    if !valid {
        return Err(DataError::Ratios(ratios));
    }
    let n = catalog.events.len();
    if n < 3 {
        return Err(DataError::TooFewEvents(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| catalog.events[a].origin_time.total_cmp(&catalog.events[b].origin_time));
    // A tiny tolerance keeps exact products such as 10 * 0.6 from rounding down.
    let count = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let n_train = count(train).min(n);
    let n_val = count(val).min(n - n_train);
    let subset = |range: std::ops::Range<usize>| Catalog {
        stations: catalog.stations.clone(),
        events: order[range].iter().map(|&i| catalog.events[i].clone()).collect(),
        sample_rate: catalog.sample_rate,
        n_samples: catalog.n_samples,
        thresholds: catalog.thresholds.clone(),
    };
    Ok((
        subset(0..n_train),
        subset(n_train..n_train + n_val),
        subset(n_train + n_val..n),
    ))
}
