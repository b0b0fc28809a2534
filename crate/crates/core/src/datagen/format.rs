use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Catalog, DataError, EventRecord, Hypocenter, Result, StationLabel, StationMeta};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    sample_rate: f64,
    n_samples: usize,
    thresholds: Vec<f64>,
    stations: Vec<StationMeta>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

#[derive(Serialize, Deserialize)]
struct EventFile {
    event_id: u64,
    origin_time: f64,
    hypocenter: Hypocenter,
    magnitude: f64,
    stations: Vec<StationLabel>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> DataError + '_ {
    move |source| DataError::Json {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(json_err(path))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes `catalog` under `dir`: `manifest.json` plus `events/<id>.json` and
/// `events/<id>.f32` per event.
pub fn write_dataset(catalog: &Catalog, dir: &Path) -> Result<()> {
    catalog.validate()?;
    let events_dir = dir.join("events");
    fs::create_dir_all(&events_dir).map_err(io_err(&events_dir))?;
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            format_version: FORMAT_VERSION,
            sample_rate: catalog.sample_rate,
            n_samples: catalog.n_samples,
            thresholds: catalog.thresholds.clone(),
            stations: catalog.stations.clone(),
        },
    )?;
    for e in &catalog.events {
        write_json(
            &events_dir.join(format!("{}.json", e.event_id)),
            &EventFile {
                event_id: e.event_id,
                origin_time: e.origin_time,
                hypocenter: e.hypocenter,
                magnitude: e.magnitude,
                stations: e.labels.clone(),
            },
        )?;
        let bytes: Vec<u8> = e.traces.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = events_dir.join(format!("{}.f32", e.event_id));
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Reads a dataset directory written by [`write_dataset`] or any tool that
/// follows the same layout. Events are returned in origin-time order.
pub fn read_dataset(dir: &Path) -> Result<Catalog> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
    let probe: VersionProbe = serde_json::from_slice(&raw).map_err(json_err(&manifest_path))?;
    if probe.format_version != FORMAT_VERSION {
        return Err(DataError::FormatVersion {
            found: probe.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(json_err(&manifest_path))?;
    let n = manifest.stations.len();
    let expected_bytes = n * 3 * manifest.n_samples * 4;

    let events_dir = dir.join("events");
    let mut json_files: Vec<PathBuf> = fs::read_dir(&events_dir)
        .map_err(io_err(&events_dir))?
        .map(|entry| entry.map(|e| e.path()).map_err(io_err(&events_dir)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    json_files.sort();

    let mut events = Vec::with_capacity(json_files.len());
    for path in json_files {
        let raw = fs::read(&path).map_err(io_err(&path))?;
        let file: EventFile = serde_json::from_slice(&raw).map_err(json_err(&path))?;
        if file.stations.len() != n {
            return Err(DataError::StationCount {
                event_id: file.event_id,
                expected: n,
                found: file.stations.len(),
            });
        }
        let trace_path = path.with_extension("f32");
        let bytes = fs::read(&trace_path).map_err(io_err(&trace_path))?;
        if bytes.len() != expected_bytes {
            return Err(DataError::TraceLength {
                event_id: file.event_id,
                expected: expected_bytes,
                found: bytes.len(),
            });
        }
        let traces: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        events.push(EventRecord {
            event_id: file.event_id,
            origin_time: file.origin_time,
            hypocenter: file.hypocenter,
            magnitude: file.magnitude,
            labels: file.stations,
            traces: Arc::from(traces),
        });
    }
    events.sort_by(|a, b| {
        a.origin_time
            .total_cmp(&b.origin_time)
            .then(a.event_id.cmp(&b.event_id))
    });
    let catalog = Catalog {
        stations: manifest.stations,
        events,
        sample_rate: manifest.sample_rate,
        n_samples: manifest.n_samples,
        thresholds: manifest.thresholds,
    };
    catalog.validate()?;
    Ok(catalog)
}
