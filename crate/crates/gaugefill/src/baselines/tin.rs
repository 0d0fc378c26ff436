//! Triangulated irregular network: Delaunay triangulation with barycentric
//! linear interpolation inside the convex hull, an explicit signal outside.

use spade::{DelaunayTriangulation, HasPosition, Point2, Triangulation};

use super::{P2, Sample};
use crate::error::{Error, Result};

struct ValuedPoint {
    pos: Point2<f64>,
    value: f64,
}

impl HasPosition for ValuedPoint {
    type Scalar = f64;

    fn position(&self) -> Point2<f64> {
        self.pos
    }
}

/// What TIN interpolation yields at a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TinValue {
    Inside(f64),
    /// The query lies outside the convex hull of the known points; the
    /// caller decides whether to fall back.
    OutsideHull,
}

pub struct Tin {
    triangulation: DelaunayTriangulation<ValuedPoint>,
}

impl Tin {
    /// Triangulate the known points. Fewer than 3 distinct points or a fully
    /// collinear configuration is an error.
    pub fn build(known: &[Sample]) -> Result<Tin> {
        if known.len() < 3 {
            return Err(Error::contract(
                "tin_interpolate",
                format!("need at least 3 known points, got {}", known.len()),
            ));
        }
        let mut triangulation: DelaunayTriangulation<ValuedPoint> = DelaunayTriangulation::new();
        for s in known {
            triangulation
                .insert(ValuedPoint {
                    pos: Point2::new(s.at.x, s.at.y),
                    value: s.value,
                })
                .map_err(|e| Error::contract("tin_interpolate", format!("bad point: {e:?}")))?;
        }
        if triangulation.num_inner_faces() == 0 {
            return Err(Error::contract(
                "tin_interpolate",
                "points are collinear; no triangles exist",
            ));
        }
        Ok(Tin { triangulation })
    }

    /// Barycentric-linear value inside the hull, or the outside-hull signal.
    pub fn interpolate(&self, query: P2) -> TinValue {
        use spade::PositionInTriangulation::*;
        let p = Point2::new(query.x, query.y);
        match self.triangulation.locate(p) {
            OnVertex(v) => TinValue::Inside(self.triangulation.vertex(v).data().value),
            OnEdge(e) => {
                let edge = self.triangulation.directed_edge(e);
                let a = edge.from();
                let b = edge.to();
                let (pa, pb) = (a.position(), b.position());
                let len2 = (pb.x - pa.x).powi(2) + (pb.y - pa.y).powi(2);
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    (((p.x - pa.x) * (pb.x - pa.x) + (p.y - pa.y) * (pb.y - pa.y)) / len2)
                        .clamp(0.0, 1.0)
                };
                TinValue::Inside((1.0 - t) * a.data().value + t * b.data().value)
            }
            OnFace(f) => {
                let face = self.triangulation.face(f);
                let vs = face.vertices();
                let [pa, pb, pc] = [vs[0].position(), vs[1].position(), vs[2].position()];
                let det = (pb.y - pc.y) * (pa.x - pc.x) + (pc.x - pb.x) * (pa.y - pc.y);
                let wa = ((pb.y - pc.y) * (p.x - pc.x) + (pc.x - pb.x) * (p.y - pc.y)) / det;
                let wb = ((pc.y - pa.y) * (p.x - pc.x) + (pa.x - pc.x) * (p.y - pc.y)) / det;
                let wc = 1.0 - wa - wb;
                TinValue::Inside(
                    wa * vs[0].data().value + wb * vs[1].data().value + wc * vs[2].data().value,
                )
            }
            OutsideOfConvexHull(_) | NoTriangulation => TinValue::OutsideHull,
        }
    }

    /// Interpolate, falling back to the nearest known value outside the hull.
    pub fn interpolate_or_nearest(&self, query: P2) -> f64 {
        match self.interpolate(query) {
            TinValue::Inside(v) => v,
            TinValue::OutsideHull => {
                let p = Point2::new(query.x, query.y);
                self.triangulation
                    .nearest_neighbor(p)
                    .map(|v| v.data().value)
                    .unwrap_or(f64::NAN)
            }
        }
    }
}
