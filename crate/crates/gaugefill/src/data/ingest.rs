//! CSV ingestion for station rosters and observation records.
//!
//! Roster format: header `id,lat,lon`, one row per station.
//! Records format: header `station_id,timestamp,value_mm`, timestamps
//! ISO-8601 with an explicit UTC offset (e.g. `2020-06-01T14:00:00Z`).

use std::collections::HashMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::geo::{Station, StationSet};

/// One timestamp's observations over the station roster.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub timestamp: DateTime<Utc>,
    /// Value per roster index; meaningful only where `observed` is true.
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
}

impl Snapshot {
    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }
}

#[derive(Debug, Deserialize)]
struct RosterRow {
    id: String,
    lat: f64,
    lon: f64,
}

pub fn read_roster(path: &Path) -> Result<StationSet> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut stations = Vec::new();
    for (i, row) in reader.deserialize::<RosterRow>().enumerate() {
        let row = row.map_err(|e| Error::Ingest {
            row: i + 2,
            detail: e.to_string(),
        })?;
        let station = Station::new(row.id, row.lat, row.lon).map_err(|e| Error::Ingest {
            row: i + 2,
            detail: e.to_string(),
        })?;
        stations.push(station);
    }
    if stations.is_empty() {
        return Err(Error::config(format!(
            "roster `{}` contains no stations",
            path.display()
        )));
    }
    StationSet::new(stations)
}

#[derive(Debug, Deserialize)]
struct RecordRow {
    station_id: String,
    timestamp: String,
    value_mm: f64,
}

/// Read observation records into one snapshot per timestamp, ordered by time.
///
/// Unknown station ids and duplicate (station, timestamp) pairs are hard
/// errors carrying the offending row numbers; negative values are rejected
/// row-by-row with a logged warning.
pub fn read_records(path: &Path, roster: &StationSet) -> Result<Vec<Snapshot>> {
    let mut reader = csv::Reader::from_path(path)?;
    let id_index: HashMap<&str, usize> = roster
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();

    let n = roster.len();
    // BTreeMap keeps snapshots time-ordered and ingestion deterministic.
    let mut by_time: std::collections::BTreeMap<DateTime<Utc>, (Vec<f64>, Vec<bool>)> =
        std::collections::BTreeMap::new();
    let mut seen: HashMap<(usize, DateTime<Utc>), usize> = HashMap::new();
    let mut rejected = 0usize;

    for (i, row) in reader.deserialize::<RecordRow>().enumerate() {
        let row_no = i + 2;
        let row = row.map_err(|e| Error::Ingest {
            row: row_no,
            detail: e.to_string(),
        })?;
        let station = *id_index.get(row.station_id.as_str()).ok_or(Error::Ingest {
            row: row_no,
            detail: format!("unknown station id `{}`", row.station_id),
        })?;
        let ts = DateTime::parse_from_rfc3339(&row.timestamp)
            .map_err(|e| Error::Ingest {
                row: row_no,
                detail: format!("bad timestamp `{}`: {e}", row.timestamp),
            })?
            .with_timezone(&Utc);
        if row.value_mm < 0.0 || !row.value_mm.is_finite() {
            log::warn!(
                "row {row_no}: rejecting negative/non-finite value {} at {} / {}",
                row.value_mm,
                row.station_id,
                row.timestamp
            );
            rejected += 1;
            continue;
        }
        if let Some(first_row) = seen.insert((station, ts), row_no) {
            return Err(Error::Ingest {
                row: row_no,
                detail: format!(
                    "duplicate reading for station `{}` at {}: rows {first_row} and {row_no}",
                    row.station_id, row.timestamp
                ),
            });
        }
        let slot = by_time
            .entry(ts)
            .or_insert_with(|| (vec![0.0; n], vec![false; n]));
        slot.0[station] = row.value_mm;
        slot.1[station] = true;
    }
    if rejected > 0 {
        log::warn!("rejected {rejected} rows with negative/non-finite values");
    }

    Ok(by_time
        .into_iter()
        .map(|(timestamp, (values, observed))| Snapshot {
            timestamp,
            values,
            observed,
        })
        .collect())
}

/// Keep snapshots where at least one observed value reaches the threshold.
pub fn select_rainy_hours(snapshots: Vec<Snapshot>, threshold_mm: f64) -> Vec<Snapshot> {
    snapshots
        .into_iter()
        .filter(|s| {
            s.values
                .iter()
                .zip(&s.observed)
                .any(|(&v, &o)| o && v >= threshold_mm)
        })
        .collect()
}
