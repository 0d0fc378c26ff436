//! Dataset manifest: file locations, rainy-hour threshold, and the seeded
//! train/test station split.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ingest::{read_records, read_roster, select_rainy_hours, Snapshot};
use crate::error::{Error, Result};
use crate::geo::StationSet;

fn default_threshold() -> f64 {
    0.1
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub roster: PathBuf,
    pub records: PathBuf,
    #[serde(default = "default_threshold")]
    pub rain_threshold_mm: f64,
    pub split_seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Optional [start, end) bounds on record timestamps, ISO-8601.
    #[serde(default)]
    pub time_span: Option<[String; 2]>,
}

/// Roster indices of the train/test station split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub struct LoadedDataset {
    pub roster: StationSet,
    /// Rainy-hour snapshots within the manifest's time span.
    pub snapshots: Vec<Snapshot>,
    pub split: SplitIndices,
    /// Content hash of roster + records files (hex, 16 chars).
    pub dataset_id: String,
}

impl DatasetManifest {
    /// Read a manifest, resolving relative file paths against its directory.
    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path)?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        if let Some(dir) = path.parent() {
            if m.roster.is_relative() {
                m.roster = dir.join(&m.roster);
            }
            if m.records.is_relative() {
                m.records = dir.join(&m.records);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rain_threshold_mm < 0.0 {
            return Err(Error::config("rain threshold must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("test fraction must be in [0, 1)"));
        }
        Ok(())
    }

    /// Seeded station split: stations sorted by id, shuffled, first
    /// `round(fraction * n)` become the test set. Deterministic in the seed.
    pub fn split(&self, roster: &StationSet) -> Result<SplitIndices> {
        let n = roster.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| roster.get(a).id.cmp(&roster.get(b).id));
        let mut rng = ChaCha8Rng::seed_from_u64(self.split_seed);
        order.shuffle(&mut rng);

        let n_test = ((self.test_fraction * n as f64).round() as usize).min(n.saturating_sub(2));
        let mut test: Vec<usize> = order[..n_test].to_vec();
        let mut train: Vec<usize> = order[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        if train.len() < 2 {
            return Err(Error::config(format!(
                "split leaves only {} training stations",
                train.len()
            )));
        }
        Ok(SplitIndices { train, test })
    }

    pub fn dataset_id(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(std::fs::read(&self.roster)?);
        hasher.update(std::fs::read(&self.records)?);
        let digest = hasher.finalize();
        Ok(hex_prefix(&digest, 16))
    }

    fn time_bounds(&self) -> Result<Option<(DateTime<Utc>, DateTime<Utc>)>> {
        match &self.time_span {
            None => Ok(None),
            Some([start, end]) => {
                let parse = |s: &str| -> Result<DateTime<Utc>> {
                    Ok(DateTime::parse_from_rfc3339(s)
                        .map_err(|e| Error::config(format!("bad time span bound `{s}`: {e}")))?
                        .with_timezone(&Utc))
                };
                Ok(Some((parse(start)?, parse(end)?)))
            }
        }
    }
}

/// Load roster and records, apply the time span and rainy-hour filters, and
/// compute the split.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<LoadedDataset> {
    let roster = read_roster(&manifest.roster)?;
    let mut snapshots = read_records(&manifest.records, &roster)?;
    if let Some((start, end)) = manifest.time_bounds()? {
        snapshots.retain(|s| s.timestamp >= start && s.timestamp < end);
    }
    let snapshots = select_rainy_hours(snapshots, manifest.rain_threshold_mm);
    let split = manifest.split(&roster)?;
    let dataset_id = manifest.dataset_id()?;
    Ok(LoadedDataset {
        roster,
        snapshots,
        split,
        dataset_id,
    })
}

pub fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}
