//! Inverse-distance weighting.

use super::{P2, PointMetric, Sample};
use crate::error::{Error, Result};

/// Coincidence threshold: queries closer than this to a known point take its
/// value directly (kilometers when the metric is geographic).
pub const EXACT_MATCH_DIST: f64 = 1e-9;

/// Weighted average of the known values with weights `dist^-power`.
/// A query coinciding with a known point returns that value exactly.
pub fn idw(known: &[Sample], query: P2, power: f64, metric: &dyn PointMetric) -> Result<f64> {
    if known.is_empty() {
        return Err(Error::contract("idw", "no known points"));
    }
    if power <= 0.0 {
        return Err(Error::contract("idw", format!("power must be > 0, got {power}")));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for s in known {
        let d = metric.dist(s.at, query);
        if d < EXACT_MATCH_DIST {
            return Ok(s.value);
        }
        let w = d.powf(-power);
        num += w * s.value;
        den += w;
    }
    Ok(num / den)
}
