//! Empirical semivariogram estimation and spherical model fitting.

use super::{PointMetric, Sample};
use crate::error::{Error, Result};

/// Spherical variogram model. `gamma(0) = 0` exactly; the nugget appears as
/// the discontinuity as `h -> 0+`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Variogram {
    pub nugget: f64,
    pub sill: f64,
    pub range: f64,
}

impl Variogram {
    pub fn value(&self, h: f64) -> f64 {
        if h <= 0.0 {
            return 0.0;
        }
        if h >= self.range {
            return self.sill;
        }
        let t = h / self.range;
        self.nugget + (self.sill - self.nugget) * (1.5 * t - 0.5 * t * t * t)
    }
}

/// One bin of the empirical semivariogram.
#[derive(Debug, Clone, Copy)]
pub struct EmpiricalBin {
    /// Bin-center separation.
    pub h: f64,
    /// Mean semivariance of the pairs in the bin.
    pub gamma: f64,
    pub pairs: usize,
}

/// Accumulates binned pair semivariances, possibly across many snapshots
/// sharing one geometry (fixed bin edges).
#[derive(Debug, Clone)]
pub struct BinAccumulator {
    width: f64,
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl BinAccumulator {
    /// Fixed bin edges spanning `[0, max_h]`.
    pub fn new(bins: usize, max_h: f64) -> Result<BinAccumulator> {
        if bins == 0 {
            return Err(Error::contract("fit_variogram", "bins must be >= 1"));
        }
        if max_h <= 0.0 {
            return Err(Error::contract(
                "fit_variogram",
                "degenerate geometry: all points coincide",
            ));
        }
        Ok(BinAccumulator {
            width: max_h / bins as f64,
            sums: vec![0.0; bins],
            counts: vec![0; bins],
        })
    }

    pub fn add_pairs(&mut self, known: &[Sample], metric: &dyn PointMetric) {
        let bins = self.sums.len();
        for i in 0..known.len() {
            for j in i + 1..known.len() {
                let h = metric.dist(known[i].at, known[j].at);
                if h <= 0.0 {
                    continue;
                }
                let b = ((h / self.width).floor() as usize).min(bins - 1);
                let dv = known[i].value - known[j].value;
                self.sums[b] += 0.5 * dv * dv;
                self.counts[b] += 1;
            }
        }
    }

    pub fn bins(&self) -> Vec<EmpiricalBin> {
        (0..self.sums.len())
            .filter(|&b| self.counts[b] > 0)
            .map(|b| EmpiricalBin {
                h: (b as f64 + 0.5) * self.width,
                gamma: self.sums[b] / self.counts[b] as f64,
                pairs: self.counts[b],
            })
            .collect()
    }

    pub fn total_pairs(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Largest pairwise separation, 0 if everything coincides.
pub fn max_pair_distance(points: &[Sample], metric: &dyn PointMetric) -> f64 {
    let mut max_h: f64 = 0.0;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            max_h = max_h.max(metric.dist(points[i].at, points[j].at));
        }
    }
    max_h
}

/// Distance-binned empirical semivariogram over all point pairs.
pub fn empirical_semivariogram(
    known: &[Sample],
    metric: &dyn PointMetric,
    bins: usize,
) -> Result<Vec<EmpiricalBin>> {
    if known.len() < 3 {
        return Err(Error::contract(
            "fit_variogram",
            format!("need at least 3 known points, got {}", known.len()),
        ));
    }
    let mut acc = BinAccumulator::new(bins, max_pair_distance(known, metric))?;
    acc.add_pairs(known, metric);
    Ok(acc.bins())
}

/// Fit a spherical model to the binned empirical semivariogram (default 10
/// bins): for each candidate range the optimal (nugget, partial sill) is a
/// constrained pair-count-weighted least-squares solve, and the candidate
/// grid plus golden-section refinement picks the range.
pub fn fit_variogram(
    known: &[Sample],
    metric: &dyn PointMetric,
    bins: usize,
) -> Result<Variogram> {
    fit_spherical_to_bins(&empirical_semivariogram(known, metric, bins)?)
}

/// Spherical fit on precomputed bins (used for the global, all-timestamp
/// variogram mode).
pub fn fit_spherical_to_bins(emp: &[EmpiricalBin]) -> Result<Variogram> {
    if emp.is_empty() {
        return Err(Error::contract("fit_variogram", "no nonempty bins"));
    }
    let emp = emp.to_vec();
    let max_h = emp.last().map(|b| b.h).unwrap_or(1.0) * 1.2;

    let sse_at = |range: f64| -> (f64, f64, f64) {
        let (nugget, partial) = fit_linear_given_range(&emp, range);
        let model = Variogram {
            nugget,
            sill: nugget + partial,
            range,
        };
        let sse: f64 = emp
            .iter()
            .map(|b| {
                let r = model.value(b.h) - b.gamma;
                b.pairs as f64 * r * r
            })
            .sum();
        (sse, nugget, partial)
    };

    // Coarse grid over candidate ranges.
    let grid = 64;
    let mut best_range = max_h;
    let mut best_sse = f64::INFINITY;
    for g in 1..=grid {
        let range = max_h * g as f64 / grid as f64;
        let (sse, _, _) = sse_at(range);
        if sse < best_sse {
            best_sse = sse;
            best_range = range;
        }
    }

    // Golden-section refinement around the best grid cell.
    let mut lo = (best_range - 2.0 * max_h / grid as f64).max(max_h / grid as f64 * 0.1);
    let mut hi = (best_range + 2.0 * max_h / grid as f64).min(max_h);
    let phi = 0.618_033_988_749_894_9_f64;
    for _ in 0..40 {
        let a = hi - phi * (hi - lo);
        let b = lo + phi * (hi - lo);
        if sse_at(a).0 < sse_at(b).0 {
            hi = b;
        } else {
            lo = a;
        }
    }
    let range = 0.5 * (lo + hi);
    let (_, nugget, partial) = sse_at(range);

    Ok(Variogram {
        nugget,
        sill: nugget + partial,
        range,
    })
}

/// Pair-count-weighted least squares for (nugget, partial sill) at a fixed
/// range, clamped to nugget >= 0 and partial sill > 0.
fn fit_linear_given_range(emp: &[EmpiricalBin], range: f64) -> (f64, f64) {
    // Model: gamma(h) = n + c * s(h) with s the unit spherical shape.
    let shape = |h: f64| -> f64 {
        if h >= range {
            1.0
        } else {
            let t = h / range;
            1.5 * t - 0.5 * t * t * t
        }
    };
    let (mut sw, mut ss, mut sss, mut sg, mut ssg) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for b in emp {
        let w = b.pairs as f64;
        let s = shape(b.h);
        sw += w;
        ss += w * s;
        sss += w * s * s;
        sg += w * b.gamma;
        ssg += w * s * b.gamma;
    }
    let det = sw * sss - ss * ss;
    let gamma_scale = (sg / sw).abs().max(1e-12);
    let min_partial = 1e-9 * gamma_scale;

    let (mut n, mut c);
    if det.abs() < 1e-12 * sw.max(1.0) {
        n = sg / sw;
        c = min_partial;
    } else {
        n = (sss * sg - ss * ssg) / det;
        c = (sw * ssg - ss * sg) / det;
    }
    if n < 0.0 {
        // Refit c with the nugget pinned at zero.
        n = 0.0;
        c = if sss > 0.0 { ssg / sss } else { min_partial };
    }
    if c < min_partial {
        // Flat or decreasing empirical curve: pin the slope, refit the nugget.
        c = min_partial;
        n = ((sg - c * ss) / sw).max(0.0);
    }
    (n, c)
}
