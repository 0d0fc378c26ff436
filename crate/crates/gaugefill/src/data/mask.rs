//! Instance-wise standardization, mean-fill, masking and the epoch stream.
//!
//! Masking contract: a masked or unobserved node's input is the mean of the
//! remaining known values, which standardizes to exactly 0 under the
//! remaining-known statistics. Targets live in the same standardized frame.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ingest::Snapshot;
use crate::error::{Error, Result};
use crate::geo::{Station, StationSet, STD_FLOOR};

/// Mean and population standard deviation of one instance's known values.
/// `std` is stored unfloored; the floor is applied wherever it divides.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InstanceStats {
    pub mean: f64,
    pub std: f64,
}

impl InstanceStats {
    pub fn from_values(values: &[f64]) -> InstanceStats {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        InstanceStats {
            mean,
            std: var.sqrt().max(0.0),
        }
    }

    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std.max(STD_FLOOR)
    }
}

/// Map a standardized prediction back to millimeters.
pub fn destandardize(pred_std: f64, stats: &InstanceStats, clamp_nonneg: bool) -> f64 {
    let y = pred_std * stats.std.max(STD_FLOOR) + stats.mean;
    if clamp_nonneg {
        y.max(0.0)
    } else {
        y
    }
}

/// What a masked/unobserved node's raw input is replaced with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    /// Mean of the remaining known values (standardizes to exactly 0).
    Mean,
    /// Raw zero millimeters (ablation; standardizes to `-mean/std`).
    Zero,
}

/// One training instance.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    /// Which snapshot this sequence was drawn from.
    pub snapshot_index: usize,
    /// Sequence position -> roster index.
    pub node_order: Vec<usize>,
    /// Standardized, filled inputs, length L.
    pub x_std: Vec<f64>,
    /// Sequence positions that stay known (build the plan's observed set).
    pub observed_rows: Vec<usize>,
    /// Sequence positions hidden for recovery (subset of originally known).
    pub mask_indices: Vec<usize>,
    /// Standardized true values at `mask_indices`.
    pub targets_std: Vec<f64>,
    /// Remaining-known statistics used for this instance's frame.
    pub stats: InstanceStats,
}

/// Randomly mask known nodes of a snapshot. Returns `None` (sequence
/// skipped) when fewer than two known nodes exist.
pub fn dynamic_mask(
    snapshot: &Snapshot,
    snapshot_index: usize,
    ratio: f64,
    fill: FillMode,
    rng: &mut ChaCha8Rng,
) -> Result<Option<MaskedSequence>> {
    if !(0.0..1.0).contains(&ratio) || ratio <= 0.0 {
        return Err(Error::contract(
            "dynamic_mask",
            format!("mask ratio must be in (0, 1), got {ratio}"),
        ));
    }
    let known: Vec<usize> = (0..snapshot.values.len())
        .filter(|&i| snapshot.observed[i])
        .collect();
    if known.len() < 2 {
        log::warn!(
            "skipping snapshot {snapshot_index}: only {} known node(s)",
            known.len()
        );
        return Ok(None);
    }

    // floor(ratio * known), at least 1, and at least 1 node left known.
    let n_mask = ((ratio * known.len() as f64).floor() as usize)
        .max(1)
        .min(known.len() - 1);
    let mut pool = known.clone();
    pool.shuffle(rng);
    let mut masked: Vec<usize> = pool[..n_mask].to_vec();
    masked.sort_unstable();

    build_sequence(snapshot, snapshot_index, &known, &masked, fill)
}

fn build_sequence(
    snapshot: &Snapshot,
    snapshot_index: usize,
    known: &[usize],
    masked: &[usize],
    fill: FillMode,
) -> Result<Option<MaskedSequence>> {
    let is_masked = |i: usize| masked.binary_search(&i).is_ok();
    let remaining: Vec<usize> = known.iter().copied().filter(|&i| !is_masked(i)).collect();
    let remaining_values: Vec<f64> = remaining.iter().map(|&i| snapshot.values[i]).collect();
    let stats = InstanceStats::from_values(&remaining_values);

    let n = snapshot.values.len();
    let mut x_std = vec![0.0f64; n];
    for &i in &remaining {
        x_std[i] = stats.standardize(snapshot.values[i]);
    }
    if fill == FillMode::Zero {
        let zero_std = stats.standardize(0.0);
        for (i, x) in x_std.iter_mut().enumerate() {
            if !remaining.binary_search(&i).is_ok() {
                *x = zero_std;
            }
        }
    }

    let targets_std: Vec<f64> = masked
        .iter()
        .map(|&i| stats.standardize(snapshot.values[i]))
        .collect();
    if !targets_std.iter().all(|t| t.is_finite()) {
        return Err(Error::Numeric { op: "dynamic_mask" });
    }

    Ok(Some(MaskedSequence {
        snapshot_index,
        node_order: (0..n).collect(),
        x_std,
        observed_rows: remaining,
        mask_indices: masked.to_vec(),
        targets_std,
        stats,
    }))
}

#[derive(Debug, Clone, Copy)]
pub struct EpochConfig {
    pub remask_count: usize,
    pub mask_ratio: f64,
    pub seed: u64,
    /// Generate masks once (epoch key 0) and replay them every epoch.
    pub static_masking: bool,
    pub fill: FillMode,
}

/// All masked sequences for one epoch: `remask_count` independently masked
/// copies of every snapshot, in shuffled order. Per-sequence RNGs are derived
/// from (seed, epoch, snapshot, repeat), so the stream is reproducible and
/// order-independent.
pub fn epoch_sequences(
    snapshots: &[Snapshot],
    epoch: u64,
    cfg: &EpochConfig,
) -> Result<Vec<MaskedSequence>> {
    if cfg.remask_count == 0 {
        return Err(Error::contract("epoch_sequences", "remask count must be >= 1"));
    }
    let mask_epoch = if cfg.static_masking { 0 } else { epoch };
    let mut out = Vec::with_capacity(snapshots.len() * cfg.remask_count);
    for (i, snap) in snapshots.iter().enumerate() {
        for r in 0..cfg.remask_count {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                cfg.seed,
                0x6d61_736b, // masking stream tag
                mask_epoch,
                i as u64,
                r as u64,
            ]));
            if let Some(seq) = dynamic_mask(snap, i, cfg.mask_ratio, cfg.fill, &mut rng)? {
                out.push(seq);
            }
        }
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
        cfg.seed,
        0x7368_7566, // shuffle stream tag
        epoch,
    ]));
    out.shuffle(&mut order_rng);
    Ok(out)
}

/// An inference instance: the roster plus query locations appended as
/// unobserved nodes.
#[derive(Debug, Clone)]
pub struct InferenceSequence {
    /// Node coordinates in sequence order (roster stations, then queries).
    pub points: Vec<Station>,
    /// Standardized, filled inputs.
    pub x_std: Vec<f64>,
    /// Sequence positions with known observations.
    pub observed_rows: Vec<usize>,
    /// Sequence positions of the appended queries.
    pub query_rows: Vec<usize>,
    pub stats: InstanceStats,
}

/// Append query locations to a snapshot's roster as unobserved nodes, with
/// mean-filled standardized inputs.
pub fn fill_for_inference(
    roster: &StationSet,
    snapshot: &Snapshot,
    queries: &[Station],
) -> Result<InferenceSequence> {
    if snapshot.values.len() != roster.len() {
        return Err(Error::shape(
            "fill_for_inference",
            format!(
                "snapshot width {} vs roster size {}",
                snapshot.values.len(),
                roster.len()
            ),
        ));
    }
    let observed_rows: Vec<usize> = (0..roster.len())
        .filter(|&i| snapshot.observed[i])
        .collect();
    if observed_rows.is_empty() {
        return Err(Error::contract(
            "fill_for_inference",
            "snapshot has no observed stations",
        ));
    }
    for q in queries {
        Station::new(q.id.clone(), q.lat, q.lon)?;
    }

    let known_values: Vec<f64> = observed_rows.iter().map(|&i| snapshot.values[i]).collect();
    let stats = InstanceStats::from_values(&known_values);

    let n = roster.len();
    let l = n + queries.len();
    let mut x_std = vec![0.0f64; l];
    for &i in &observed_rows {
        x_std[i] = stats.standardize(snapshot.values[i]);
    }

    let mut points: Vec<Station> = roster.iter().cloned().collect();
    points.extend(queries.iter().cloned());

    Ok(InferenceSequence {
        points,
        x_std,
        observed_rows,
        query_rows: (n..l).collect(),
        stats,
    })
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Stable seed derivation for independent RNG streams.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243F_6A88_85A3_08D3u64;
    for &p in parts {
        h = splitmix64(h ^ p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    h
}
