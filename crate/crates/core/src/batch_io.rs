//! Measurement batch files.
//!
//! A batch is a CSV file with one row per sensor and epoch:
//!
//! ```text
//! sensor_id,epoch_index,rng_m,az_rad,el_rad
//! 0,0,10234.5,0.7853,0.1021
//! 1,0,,1.2001,0.0873
//! ```
//!
//! `rng_m` is empty for 2D sensors. Sensor locations and kinds live in a
//! sidecar JSON file next to it (`batch.csv` -> `batch.sensors.json`):
//!
//! ```text
//! {"sensors": [{"sensor_id": 0, "kind": "3d", "location_m": [0.0, 0.0, 0.0]}, ...]}
//! ```
//!
//! Every sensor must report the same set of epochs; rows may come in any
//! order and are sorted by epoch on reading.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{MeasurementBatch, SensorKind, SensorTrack};
use crate::geometry::{Measurement, Vec3};
use crate::harness::{write_json, HarnessError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorInfo {
    pub sensor_id: usize,
    pub kind: SensorKind,
    pub location_m: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub sensors: Vec<SensorInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    sensor_id: usize,
    epoch_index: usize,
    rng_m: Option<f64>,
    az_rad: f64,
    el_rad: f64,
}

/// Sidecar path belonging to a batch CSV path.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("sensors.json")
}

/// Writes `batch` to `csv_path` and its sidecar. Epochs are numbered by
/// `epochs` when given (e.g. original indices after down-sampling).
pub fn write_batch(batch: &MeasurementBatch, csv_path: &Path, epochs: Option<&[usize]>) -> Result<(), HarnessError> {
    if let Some(e) = epochs {
        if e.len() != batch.len() {
            return Err(HarnessError::Config(format!(
                "{} epoch labels for {} epochs",
                e.len(),
                batch.len()
            )));
        }
    }
    if let Some(parent) = csv_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    let csv_err = |source| HarnessError::Csv {
        path: csv_path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(csv_path).map_err(csv_err)?;
    for (s, track) in batch.sensors().iter().enumerate() {
        for (i, m) in track.measurements.iter().enumerate() {
            let row = Row {
                sensor_id: s,
                epoch_index: epochs.map_or(i, |e| e[i]),
                rng_m: m.range,
                az_rad: m.azimuth,
                el_rad: m.elevation,
            };
            w.serialize(row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| HarnessError::io(csv_path, e))?;

    let sidecar = Sidecar {
        sensors: batch
            .sensors()
            .iter()
            .enumerate()
            .map(|(s, t)| SensorInfo {
                sensor_id: s,
                kind: t.kind,
                location_m: [t.location.x, t.location.y, t.location.z],
            })
            .collect(),
    };
    write_json(&sidecar_path(csv_path), &sidecar)
}

/// Reads a batch written by [`write_batch`] or recorded elsewhere in the
/// same format.
pub fn read_batch(csv_path: &Path) -> Result<MeasurementBatch, HarnessError> {
    read_batch_with_sidecar(csv_path, &sidecar_path(csv_path))
}

pub fn read_batch_with_sidecar(csv_path: &Path, sidecar: &Path) -> Result<MeasurementBatch, HarnessError> {
    let text = fs::read_to_string(sidecar).map_err(|e| HarnessError::io(sidecar, e))?;
    let info: Sidecar = serde_json::from_str(&text).map_err(|source| HarnessError::Json {
        path: sidecar.to_path_buf(),
        source,
    })?;
    let format = |path: &Path, message: String| HarnessError::Format {
        path: path.to_path_buf(),
        message,
    };

    let mut sensors = info.sensors;
    sensors.sort_by_key(|s| s.sensor_id);
    if sensors.iter().enumerate().any(|(k, s)| s.sensor_id != k) {
        return Err(format(sidecar, "sensor ids must be 0, 1, ..., S-1".into()));
    }

    let mut per_sensor: Vec<BTreeMap<usize, Measurement>> = vec![BTreeMap::new(); sensors.len()];
    let csv_err = |source| HarnessError::Csv {
        path: csv_path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(csv_path).map_err(csv_err)?;
    for (line, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(csv_err)?;
        let at = |msg: &str| format(csv_path, format!("data row {}: {msg}", line + 1));
        let Some(info) = sensors.get(row.sensor_id) else {
            return Err(at(&format!("unknown sensor {}", row.sensor_id)));
        };
        let range = match (info.kind, row.rng_m) {
            (SensorKind::ThreeD, None) => return Err(at("3D sensor without range")),
            (SensorKind::TwoD, _) => None,
            (SensorKind::ThreeD, r) => r,
        };
        let m = Measurement {
            range,
            azimuth: row.az_rad,
            elevation: row.el_rad,
        };
        if per_sensor[row.sensor_id].insert(row.epoch_index, m).is_some() {
            return Err(at(&format!(
                "duplicate epoch {} for sensor {}",
                row.epoch_index, row.sensor_id
            )));
        }
    }

    if let Some(first) = per_sensor.first() {
        for (s, m) in per_sensor.iter().enumerate() {
            if !m.keys().eq(first.keys()) {
                return Err(format(
                    csv_path,
                    format!("sensor {s} does not share the epochs of sensor 0"),
                ));
            }
        }
    }
    let tracks = sensors
        .iter()
        .zip(per_sensor)
        .map(|(info, m)| SensorTrack {
            location: Vec3::from(info.location_m),
            kind: info.kind,
            measurements: m.into_values().collect(),
        })
        .collect();
    MeasurementBatch::new(tracks).map_err(|e| format(csv_path, e.to_string()))
}
