//! Spatial primitives: stations, great-circle distances, bearings, and the
//! pairwise relative-position table with its global standardization stats.
//!
//! Distances are haversine on a spherical Earth (radius 6371.0088 km) unless a
//! custom [`DistanceProvider`] is supplied. Azimuths are clockwise bearings
//! from north in `[0, 360)` degrees, computed on the local tangent plane of
//! the origin point. Both conventions are load-bearing for checkpoint
//! compatibility: a trained model's relative-position embeddings only make
//! sense under the conventions it was trained with.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in kilometers (IUGG R1).
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Floor applied to every standard deviation used as a divisor.
pub const STD_FLOOR: f64 = 1e-8;

/// A gauge location. Coordinates are WGS-style degrees, spherical Earth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    /// Latitude in degrees, [-90, 90].
    pub lat: f64,
    /// Longitude in degrees, [-180, 180].
    pub lon: f64,
}

impl Station {
    pub fn new(id: impl Into<String>, lat: f64, lon: f64) -> Result<Self> {
        let id = id.into();
        if !(-90.0..=90.0).contains(&lat) || !lat.is_finite() {
            return Err(Error::config(format!(
                "station `{id}`: latitude {lat} out of [-90, 90]"
            )));
        }
        if !(-180.0..=180.0).contains(&lon) || !lon.is_finite() {
            return Err(Error::config(format!(
                "station `{id}`: longitude {lon} out of [-180, 180]"
            )));
        }
        Ok(Station { id, lat, lon })
    }
}

/// Immutable roster of stations with unique ids.
#[derive(Debug, Clone)]
pub struct StationSet {
    stations: Vec<Station>,
}

impl StationSet {
    pub fn new(stations: Vec<Station>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for s in &stations {
            if !seen.insert(s.id.clone()) {
                return Err(Error::config(format!("duplicate station id `{}`", s.id)));
            }
        }
        Ok(StationSet { stations })
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn get(&self, i: usize) -> &Station {
        &self.stations[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Station> {
        self.stations.iter()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.stations.iter().position(|s| s.id == id)
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    /// Sub-roster selected by indices (used for train/test splits).
    pub fn subset(&self, indices: &[usize]) -> Result<StationSet> {
        let stations = indices.iter().map(|&i| self.stations[i].clone()).collect();
        StationSet::new(stations)
    }
}

/// Relative position of one point with respect to another.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelPos {
    /// Separation in kilometers, >= 0.
    pub distance_km: f64,
    /// Clockwise bearing from north, [0, 360) degrees. Zero for coincident
    /// points by convention.
    pub azimuth_deg: f64,
}

/// Pluggable point-to-point distance. The default is great-circle haversine;
/// a travel-distance provider can be swapped in without touching anything
/// downstream of the relative-position table.
pub trait DistanceProvider {
    fn distance_km(&self, a: &Station, b: &Station) -> f64;
}

/// Great-circle distance on the spherical Earth.
#[derive(Debug, Clone, Copy, Default)]
pub struct Haversine;

impl DistanceProvider for Haversine {
    fn distance_km(&self, a: &Station, b: &Station) -> f64 {
        distance_km(a, b)
    }
}

/// Haversine great-circle distance in kilometers.
pub fn distance_km(a: &Station, b: &Station) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = lat2 - lat1;
    let dlon = wrap_degrees(b.lon - a.lon).to_radians();

    let sh_lat = (dlat * 0.5).sin();
    let sh_lon = (dlon * 0.5).sin();
    let h = sh_lat * sh_lat + lat1.cos() * lat2.cos() * sh_lon * sh_lon;
    let central = 2.0 * h.sqrt().atan2((1.0 - h).sqrt());
    EARTH_RADIUS_KM * central
}

/// Clockwise bearing from north at `a` toward `b`, in [0, 360) degrees.
///
/// Computed as atan2(east-offset, north-offset) on the local tangent plane at
/// `a`. Coincident points return 0 by the degenerate-pair convention.
pub fn azimuth_deg(a: &Station, b: &Station) -> f64 {
    let dlat = b.lat - a.lat;
    let dlon = wrap_degrees(b.lon - a.lon);
    if dlat == 0.0 && dlon == 0.0 {
        return 0.0;
    }
    let east = dlon.to_radians() * a.lat.to_radians().cos();
    let north = dlat.to_radians();
    let deg = east.atan2(north).to_degrees();
    normalize_bearing(deg)
}

/// Relative position of `b` as seen from `a`.
pub fn relpos(a: &Station, b: &Station, metric: &dyn DistanceProvider) -> RelPos {
    RelPos {
        distance_km: metric.distance_km(a, b),
        azimuth_deg: azimuth_deg(a, b),
    }
}

fn wrap_degrees(dlon: f64) -> f64 {
    let mut d = dlon % 360.0;
    if d > 180.0 {
        d -= 360.0;
    } else if d < -180.0 {
        d += 360.0;
    }
    d
}

fn normalize_bearing(deg: f64) -> f64 {
    let mut d = deg % 360.0;
    if d < 0.0 {
        d += 360.0;
    }
    // -1e-15 % 360 can normalize to exactly 360.0; fold it back.
    if d >= 360.0 {
        d = 0.0;
    }
    d
}

/// Population mean and standard deviation of a component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    /// Population statistics. Empty input is a contract violation at the call
    /// sites that build tables, so this just returns zeros for it.
    pub fn population(values: impl Iterator<Item = f64>) -> Stats {
        let mut n = 0usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for v in values {
            n += 1;
            sum += v;
            sum_sq += v * v;
        }
        if n == 0 {
            return Stats { mean: 0.0, std: 0.0 };
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        Stats {
            mean,
            std: var.sqrt(),
        }
    }

    /// Standardize one value: `(v - mean) / max(std, STD_FLOOR)`.
    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std.max(STD_FLOOR)
    }
}

/// Global standardization statistics for relative positions, computed once
/// over the training roster and reused at inference (they travel with the
/// checkpoint).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelPosStats {
    pub dist: Stats,
    pub azim: Stats,
}

/// Full pairwise relative-position table over a station roster.
#[derive(Debug, Clone, PartialEq)]
pub struct RelPosTable {
    n: usize,
    /// Row-major n*n entries; `entries[i*n + j]` is the position of j seen from i.
    entries: Vec<RelPos>,
    stats: RelPosStats,
}

impl RelPosTable {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> RelPos {
        self.entries[i * self.n + j]
    }

    pub fn stats(&self) -> RelPosStats {
        self.stats
    }

    /// Standardized table as a flat n*n*2 array:
    /// `[i*n*2 + j*2]` = standardized distance, `[.. + 1]` = standardized azimuth.
    /// The diagonal is standardized like any other entry.
    pub fn standardized(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * self.n * 2);
        for e in &self.entries {
            out.push(self.stats.dist.standardize(e.distance_km));
            out.push(self.stats.azim.standardize(e.azimuth_deg));
        }
        out
    }
}

/// Build the full pairwise table for a roster and compute the global
/// standardization statistics over its off-diagonal entries.
pub fn build_relpos_table(
    stations: &StationSet,
    metric: &dyn DistanceProvider,
) -> Result<RelPosTable> {
    let n = stations.len();
    if n < 2 {
        return Err(Error::config(format!(
            "relative-position table needs at least 2 stations, got {n}"
        )));
    }
    let mut entries = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                entries.push(RelPos {
                    distance_km: 0.0,
                    azimuth_deg: 0.0,
                });
            } else {
                entries.push(relpos(stations.get(i), stations.get(j), metric));
            }
        }
    }
    let off_diag = |f: fn(&RelPos) -> f64| {
        let entries = &entries;
        (0..n).flat_map(move |i| {
            (0..n)
                .filter(move |&j| j != i)
                .map(move |j| f(&entries[i * n + j]))
        })
    };
    let stats = RelPosStats {
        dist: Stats::population(off_diag(|e| e.distance_km)),
        azim: Stats::population(off_diag(|e| e.azimuth_deg)),
    };
    Ok(RelPosTable { n, entries, stats })
}

/// Standardized pairwise relative positions for an arbitrary point list,
/// using previously computed (training-time) statistics. Returns the same
/// flat n*n*2 layout as [`RelPosTable::standardized`].
pub fn standardized_relpos_for(
    points: &[Station],
    metric: &dyn DistanceProvider,
    stats: &RelPosStats,
) -> Vec<f64> {
    let n = points.len();
    let mut out = Vec::with_capacity(n * n * 2);
    for i in 0..n {
        for j in 0..n {
            let rp = if i == j {
                RelPos {
                    distance_km: 0.0,
                    azimuth_deg: 0.0,
                }
            } else {
                relpos(&points[i], &points[j], metric)
            };
            out.push(stats.dist.standardize(rp.distance_km));
            out.push(stats.azim.standardize(rp.azimuth_deg));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn st(id: &str, lat: f64, lon: f64) -> Station {
        Station::new(id, lat, lon).unwrap()
    }

    #[test]
    fn distance_identical_points_is_zero() {
        let a = st("a", 0.0, 0.0);
        assert_eq!(distance_km(&a, &a), 0.0);
    }

    #[test]
    fn distance_one_degree_longitude_at_equator() {
        // Closed form: one degree of arc on the sphere is R * pi / 180.
        let expected = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
        let d = distance_km(&st("a", 0.0, 0.0), &st("b", 0.0, 1.0));
        assert!((d - expected).abs() < 1e-9, "d={d} expected={expected}");
        assert!((d - 111.1949).abs() < 1e-3, "d={d}");
    }

    #[test]
    fn distance_symmetry_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let a = st("a", rng.gen_range(-89.0..89.0), rng.gen_range(-180.0..180.0));
            let b = st("b", rng.gen_range(-89.0..89.0), rng.gen_range(-180.0..180.0));
            assert_eq!(distance_km(&a, &b), distance_km(&b, &a));
        }
    }

    #[test]
    fn azimuth_cardinal_directions() {
        let origin = st("o", 0.0, 0.0);
        assert_eq!(azimuth_deg(&origin, &st("n", 1.0, 0.0)), 0.0);
        assert_eq!(azimuth_deg(&origin, &st("e", 0.0, 1.0)), 90.0);
        assert_eq!(azimuth_deg(&origin, &st("s", -1.0, 0.0)), 180.0);
        assert_eq!(azimuth_deg(&origin, &st("w", 0.0, -1.0)), 270.0);
    }

    #[test]
    fn azimuth_coincident_points_is_zero() {
        let a = st("a", 12.5, -3.25);
        let b = st("b", 12.5, -3.25);
        assert_eq!(azimuth_deg(&a, &b), 0.0);
    }

    #[test]
    fn azimuth_reciprocity_on_equator() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let a = st("a", 0.0, rng.gen_range(-170.0..170.0));
            let b = st("b", 0.0, rng.gen_range(-170.0..170.0));
            if a.lon == b.lon {
                continue;
            }
            let fwd = azimuth_deg(&a, &b);
            let back = azimuth_deg(&b, &a);
            let expect = (fwd + 180.0) % 360.0;
            assert!((back - expect).abs() < 1e-6, "fwd={fwd} back={back}");
        }
    }

    #[test]
    fn table_two_stations_symmetry_and_zero_std() {
        let set = StationSet::new(vec![st("a", 0.0, 0.0), st("b", 0.0, 2.0)]).unwrap();
        let table = build_relpos_table(&set, &Haversine).unwrap();
        let ij = table.get(0, 1);
        let ji = table.get(1, 0);
        assert_eq!(table.get(0, 0).distance_km, 0.0);
        assert_eq!(table.get(1, 1).azimuth_deg, 0.0);
        assert_eq!(ij.distance_km, ji.distance_km);
        assert!((ji.azimuth_deg - (ij.azimuth_deg + 180.0) % 360.0).abs() < 1e-9);
        // Both off-diagonal distances are equal, so their std is 0 and the
        // floored standardization maps them to exactly 0.
        assert_eq!(table.stats().dist.std, 0.0);
        let z = table.standardized();
        assert_eq!(z[(0 * 2 + 1) * 2], 0.0);
        assert_eq!(z[(1 * 2 + 0) * 2], 0.0);
    }

    #[test]
    fn table_collinear_north_south_azimuths() {
        let set = StationSet::new(vec![
            st("a", 0.0, 5.0),
            st("b", 1.0, 5.0),
            st("c", 2.0, 5.0),
        ])
        .unwrap();
        let table = build_relpos_table(&set, &Haversine).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let az = table.get(i, j).azimuth_deg;
                assert!(az == 0.0 || az == 180.0, "azimuth({i},{j}) = {az}");
            }
        }
    }

    #[test]
    fn table_requires_two_stations() {
        let set = StationSet::new(vec![st("only", 0.0, 0.0)]).unwrap();
        assert!(build_relpos_table(&set, &Haversine).is_err());
    }

    #[test]
    fn standardized_off_diagonal_mean_zero_std_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stations: Vec<Station> = (0..8)
            .map(|i| {
                st(
                    &format!("s{i}"),
                    rng.gen_range(22.0..23.0),
                    rng.gen_range(113.0..114.0),
                )
            })
            .collect();
        let set = StationSet::new(stations).unwrap();
        let table = build_relpos_table(&set, &Haversine).unwrap();
        let z = table.standardized();
        let n = table.n();
        let mut dist_z = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    dist_z.push(z[(i * n + j) * 2]);
                }
            }
        }
        let mean: f64 = dist_z.iter().sum::<f64>() / dist_z.len() as f64;
        let var: f64 = dist_z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / dist_z.len() as f64;
        assert!(mean.abs() < 1e-9, "mean={mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-6, "std={}", var.sqrt());
    }

    #[test]
    fn standardize_unit_deviation() {
        let s = Stats { mean: 3.0, std: 2.0 };
        assert!((s.standardize(5.0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn table_build_is_deterministic() {
        let set = StationSet::new(vec![
            st("a", 10.0, 20.0),
            st("b", 11.0, 21.0),
            st("c", 12.5, 19.5),
        ])
        .unwrap();
        let t1 = build_relpos_table(&set, &Haversine).unwrap();
        let t2 = build_relpos_table(&set, &Haversine).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn station_validation() {
        assert!(Station::new("bad", 91.0, 0.0).is_err());
        assert!(Station::new("bad", 0.0, 181.0).is_err());
        assert!(Station::new("bad", f64::NAN, 0.0).is_err());
        assert!(StationSet::new(vec![st("x", 0.0, 0.0), st("x", 1.0, 1.0)]).is_err());
    }
}
