//! Ordinary kriging: best linear unbiased prediction with a sum-to-one
//! weight constraint enforced by a Lagrange multiplier.

use super::idw::{idw, EXACT_MATCH_DIST};
use super::solve::solve;
use super::variogram::Variogram;
use super::{P2, PointMetric, Sample};
use crate::error::{Error, Result};

/// Kriging weights and the Lagrange multiplier for one query. Coincident
/// known points are collapsed (values averaged) before building the system;
/// the returned samples are the deduplicated ones the weights refer to.
pub fn ordinary_kriging_weights(
    known: &[Sample],
    query: P2,
    vario: &Variogram,
    metric: &dyn PointMetric,
) -> Result<Option<(Vec<Sample>, Vec<f64>, f64)>> {
    if known.is_empty() {
        return Err(Error::contract("ordinary_kriging", "no known points"));
    }
    let dedup = collapse_duplicates(known, metric);
    let m = dedup.len();

    let n = m + 1;
    let mut a = vec![0.0f64; n * n];
    for i in 0..m {
        for j in 0..m {
            if i != j {
                a[i * n + j] = vario.value(metric.dist(dedup[i].at, dedup[j].at));
            }
        }
        a[i * n + m] = 1.0;
        a[m * n + i] = 1.0;
    }
    let mut b = Vec::with_capacity(n);
    for s in &dedup {
        b.push(vario.value(metric.dist(s.at, query)));
    }
    b.push(1.0);

    match solve(a, b, n) {
        Some(sol) => {
            let mu = sol[m];
            let weights = sol[..m].to_vec();
            Ok(Some((dedup, weights, mu)))
        }
        None => Ok(None),
    }
}

/// Kriged value and kriging variance at the query. A singular system after
/// deduplication falls back to inverse-distance weighting with a warning.
pub fn ordinary_kriging(
    known: &[Sample],
    query: P2,
    vario: &Variogram,
    metric: &dyn PointMetric,
) -> Result<(f64, f64)> {
    match ordinary_kriging_weights(known, query, vario, metric)? {
        Some((dedup, weights, mu)) => {
            let value: f64 = weights.iter().zip(&dedup).map(|(w, s)| w * s.value).sum();
            let variance: f64 = weights
                .iter()
                .zip(&dedup)
                .map(|(w, s)| w * vario.value(metric.dist(s.at, query)))
                .sum::<f64>()
                + mu;
            Ok((value, variance.max(0.0)))
        }
        None => {
            log::warn!("kriging system singular after deduplication; falling back to IDW");
            Ok((idw(known, query, 2.0, metric)?, f64::NAN))
        }
    }
}

fn collapse_duplicates(known: &[Sample], metric: &dyn PointMetric) -> Vec<Sample> {
    let mut out: Vec<(P2, f64, usize)> = Vec::new();
    for s in known {
        match out
            .iter_mut()
            .find(|(p, _, _)| metric.dist(*p, s.at) < EXACT_MATCH_DIST)
        {
            Some((_, sum, count)) => {
                *sum += s.value;
                *count += 1;
            }
            None => out.push((s.at, s.value, 1)),
        }
    }
    out.into_iter()
        .map(|(at, sum, count)| Sample {
            at,
            value: sum / count as f64,
        })
        .collect()
}
