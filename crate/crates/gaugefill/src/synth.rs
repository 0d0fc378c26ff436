//! Deterministic synthetic rainfall fields built from Gaussian rain cells.
//!
//! Each snapshot is a sum of randomly placed bumps with random amplitudes,
//! length scales and (optionally) anisotropic orientations, so the spatial
//! correlation structure changes from hour to hour. The generator provides
//! ground truth at arbitrary locations, which makes held-out evaluation
//! exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ingest::Snapshot;
use crate::data::mask::mix_seed;
use crate::error::{Error, Result};
use crate::geo::{Station, StationSet};

const KM_PER_DEG_LAT: f64 = 110.574;
const KM_PER_DEG_LON_EQ: f64 = 111.320;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldSpec {
    pub seed: u64,
    pub bbox: BBox,
    pub n_stations: usize,
    pub n_snapshots: usize,
    /// Inclusive range of rain-cell counts per snapshot.
    pub cells_per_snapshot: [usize; 2],
    /// Peak rainfall of a cell, millimeters.
    pub amplitude_range: [f64; 2],
    /// Cell length scale, kilometers.
    pub length_scale_km: [f64; 2],
    pub anisotropy: bool,
    /// Std of additive observation noise in mm; 0 keeps stations exact.
    pub noise_std_mm: f64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec {
            seed: 0,
            bbox: BBox {
                lat_min: 22.0,
                lat_max: 23.0,
                lon_min: 113.5,
                lon_max: 114.5,
            },
            n_stations: 100,
            n_snapshots: 2000,
            cells_per_snapshot: [1, 4],
            amplitude_range: [0.5, 30.0],
            length_scale_km: [8.0, 40.0],
            anisotropy: true,
            noise_std_mm: 0.0,
        }
    }
}

impl FieldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_stations == 0 || self.n_snapshots == 0 {
            return Err(Error::config("station and snapshot counts must be >= 1"));
        }
        if self.bbox.lat_min >= self.bbox.lat_max || self.bbox.lon_min >= self.bbox.lon_max {
            return Err(Error::config("bounding box is empty"));
        }
        if self.cells_per_snapshot[0] > self.cells_per_snapshot[1]
            || self.cells_per_snapshot[0] == 0
        {
            return Err(Error::config("bad cells_per_snapshot range"));
        }
        if self.amplitude_range[0] > self.amplitude_range[1] || self.amplitude_range[0] < 0.0 {
            return Err(Error::config("bad amplitude range"));
        }
        if self.length_scale_km[0] > self.length_scale_km[1] || self.length_scale_km[0] <= 0.0 {
            return Err(Error::config("bad length-scale range"));
        }
        Ok(())
    }
}

/// One Gaussian rain cell.
#[derive(Debug, Clone, Copy)]
pub struct RainCell {
    pub lat: f64,
    pub lon: f64,
    pub amplitude_mm: f64,
    pub scale_major_km: f64,
    pub scale_minor_km: f64,
    pub angle_rad: f64,
}

impl RainCell {
    /// Field contribution at a location, in millimeters.
    pub fn value_at(&self, lat: f64, lon: f64) -> f64 {
        let de = (lon - self.lon) * KM_PER_DEG_LON_EQ * self.lat.to_radians().cos();
        let dn = (lat - self.lat) * KM_PER_DEG_LAT;
        let (sin_a, cos_a) = self.angle_rad.sin_cos();
        let u = cos_a * de + sin_a * dn;
        let w = -sin_a * de + cos_a * dn;
        let q = (u / self.scale_major_km).powi(2) + (w / self.scale_minor_km).powi(2);
        self.amplitude_mm * (-0.5 * q).exp()
    }
}

pub struct SynthDataset {
    pub spec: FieldSpec,
    pub roster: StationSet,
    pub snapshots: Vec<Snapshot>,
    cells: Vec<Vec<RainCell>>,
}

impl SynthDataset {
    /// Exact (noise-free, unquantized) field value at a location and time.
    pub fn truth(&self, snapshot_index: usize, lat: f64, lon: f64) -> f64 {
        self.cells[snapshot_index]
            .iter()
            .map(|c| c.value_at(lat, lon))
            .sum()
    }

    pub fn cells(&self, snapshot_index: usize) -> &[RainCell] {
        &self.cells[snapshot_index]
    }
}

/// Generate the full dataset. The same spec always produces bit-identical
/// output; snapshots are keyed by index so generation order is immaterial.
pub fn generate(spec: &FieldSpec) -> Result<SynthDataset> {
    spec.validate()?;

    let mut station_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 0x7374_6174]));
    let stations: Vec<Station> = (0..spec.n_stations)
        .map(|i| {
            Station::new(
                format!("s{i:04}"),
                station_rng.gen_range(spec.bbox.lat_min..spec.bbox.lat_max),
                station_rng.gen_range(spec.bbox.lon_min..spec.bbox.lon_max),
            )
        })
        .collect::<Result<_>>()?;
    let roster = StationSet::new(stations)?;

    let mut snapshots = Vec::with_capacity(spec.n_snapshots);
    let mut all_cells = Vec::with_capacity(spec.n_snapshots);
    let t0 = chrono::DateTime::parse_from_rfc3339("2020-01-01T00:00:00Z")
        .unwrap()
        .with_timezone(&chrono::Utc);

    for t in 0..spec.n_snapshots {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 0x6365_6c6c, t as u64]));
        let n_cells = rng.gen_range(spec.cells_per_snapshot[0]..=spec.cells_per_snapshot[1]);
        let cells: Vec<RainCell> = (0..n_cells)
            .map(|_| {
                let scale_major = rng.gen_range(spec.length_scale_km[0]..=spec.length_scale_km[1]);
                let (scale_minor, angle) = if spec.anisotropy {
                    (
                        scale_major * rng.gen_range(0.4..=1.0),
                        rng.gen_range(0.0..std::f64::consts::PI),
                    )
                } else {
                    (scale_major, 0.0)
                };
                RainCell {
                    lat: rng.gen_range(spec.bbox.lat_min..spec.bbox.lat_max),
                    lon: rng.gen_range(spec.bbox.lon_min..spec.bbox.lon_max),
                    amplitude_mm: rng.gen_range(spec.amplitude_range[0]..=spec.amplitude_range[1]),
                    scale_major_km: scale_major,
                    scale_minor_km: scale_minor,
                    angle_rad: angle,
                }
            })
            .collect();

        let mut values = Vec::with_capacity(roster.len());
        for s in roster.iter() {
            let mut v: f64 = cells.iter().map(|c| c.value_at(s.lat, s.lon)).sum();
            if spec.noise_std_mm > 0.0 {
                // Box-Muller from two uniform draws.
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                v += spec.noise_std_mm * z;
            }
            // 0.1-mm gauge precision, nonnegative.
            values.push((v.max(0.0) * 10.0).round() / 10.0);
        }

        snapshots.push(Snapshot {
            timestamp: t0 + chrono::Duration::hours(t as i64),
            observed: vec![true; roster.len()],
            values,
        });
        all_cells.push(cells);
    }

    Ok(SynthDataset {
        spec: spec.clone(),
        roster,
        snapshots,
        cells: all_cells,
    })
}

/// Write the dataset in the same CSV formats the ingestion path reads.
/// Returns (roster path, records path).
pub fn write_csvs(ds: &SynthDataset, dir: &std::path::Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let roster_path = dir.join("roster.csv");
    let mut w = csv::Writer::from_path(&roster_path)?;
    w.write_record(["id", "lat", "lon"])?;
    for s in ds.roster.iter() {
        w.write_record([s.id.as_str(), &format!("{:.6}", s.lat), &format!("{:.6}", s.lon)])?;
    }
    w.flush()?;

    let records_path = dir.join("records.csv");
    let mut w = csv::Writer::from_path(&records_path)?;
    w.write_record(["station_id", "timestamp", "value_mm"])?;
    for snap in &ds.snapshots {
        for (i, s) in ds.roster.iter().enumerate() {
            if snap.observed[i] {
                w.write_record([
                    s.id.as_str(),
                    &snap.timestamp.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                    &format!("{:.1}", snap.values[i]),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok((roster_path, records_path))
}

/// Ground-truth grid for one snapshot as `lat,lon,value_mm` CSV rows.
pub fn write_truth_grid(
    ds: &SynthDataset,
    snapshot_index: usize,
    resolution: usize,
    path: &std::path::Path,
) -> Result<()> {
    if snapshot_index >= ds.snapshots.len() {
        return Err(Error::config(format!(
            "snapshot index {snapshot_index} out of range ({} snapshots)",
            ds.snapshots.len()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lat", "lon", "value_mm"])?;
    let b = ds.spec.bbox;
    for yi in 0..resolution {
        for xi in 0..resolution {
            let lat = b.lat_min + (b.lat_max - b.lat_min) * yi as f64 / (resolution - 1).max(1) as f64;
            let lon = b.lon_min + (b.lon_max - b.lon_min) * xi as f64 / (resolution - 1).max(1) as f64;
            let v = ds.truth(snapshot_index, lat, lon);
            w.write_record([
                format!("{lat:.6}"),
                format!("{lon:.6}"),
                format!("{v:.4}"),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
