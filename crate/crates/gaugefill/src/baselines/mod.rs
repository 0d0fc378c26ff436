//! Classical interpolators (inverse-distance weighting, ordinary kriging
//! with a spherical variogram, triangulated linear interpolation) and the
//! evaluation metric suite. All of them operate in raw millimeter space on
//! generic 2-D points with a pluggable point metric.

pub mod idw;
pub mod kriging;
pub mod metrics;
pub mod solve;
pub mod tin;
pub mod variogram;

pub use idw::idw;
pub use kriging::{ordinary_kriging, ordinary_kriging_weights};
pub use metrics::{metrics, MetricReport};
pub use tin::{Tin, TinValue};
pub use variogram::{fit_variogram, Variogram};

use crate::geo::{distance_km, Station};

/// A 2-D coordinate. For geographic use, `x` is longitude and `y` latitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct P2 {
    pub x: f64,
    pub y: f64,
}

/// A known observation at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub at: P2,
    pub value: f64,
}

impl Sample {
    pub fn new(x: f64, y: f64, value: f64) -> Sample {
        Sample {
            at: P2 { x, y },
            value,
        }
    }
}

/// Distance between two points in whatever units the caller works in.
pub trait PointMetric {
    fn dist(&self, a: P2, b: P2) -> f64;
}

/// Plain Euclidean distance in coordinate units.
#[derive(Debug, Clone, Copy, Default)]
pub struct Euclidean;

impl PointMetric for Euclidean {
    fn dist(&self, a: P2, b: P2) -> f64 {
        ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
    }
}

/// Great-circle kilometers; `x` is longitude degrees, `y` latitude degrees.
#[derive(Debug, Clone, Copy, Default)]
pub struct GreatCircleKm;

impl PointMetric for GreatCircleKm {
    fn dist(&self, a: P2, b: P2) -> f64 {
        let sa = Station {
            id: String::new(),
            lat: a.y,
            lon: a.x,
        };
        let sb = Station {
            id: String::new(),
            lat: b.y,
            lon: b.x,
        };
        distance_km(&sa, &sb)
    }
}

impl From<&Station> for P2 {
    fn from(s: &Station) -> P2 {
        P2 { x: s.lon, y: s.lat }
    }
}
