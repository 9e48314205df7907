//! Convex polygons and circle-vs-polygon contact queries.

use serde::{Deserialize, Serialize};

use crate::geometry::Pose;

pub type Vec2 = [f64; 2];

#[inline]
pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn cross(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
pub fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

/// Convex polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<Vec2>,
}

/// A single circle-vs-polygon contact. `normal` points from the polygon
/// towards the circle centre; `depth` is positive when overlapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contact {
    pub normal: Vec2,
    pub depth: f64,
    pub point: Vec2,
}

impl Polygon {
    pub fn new(vertices: Vec<Vec2>) -> Self {
        assert!(vertices.len() >= 3, "polygon needs at least three vertices");
        let p = Polygon { vertices };
        debug_assert!(p.signed_area() > 0.0, "polygon must be counter-clockwise");
        p
    }

    /// Axis-aligned rectangle centred at `(cx, cy)`.
    pub fn rect(cx: f64, cy: f64, half_w: f64, half_h: f64) -> Self {
        Polygon::new(vec![
            [cx - half_w, cy - half_h],
            [cx + half_w, cy - half_h],
            [cx + half_w, cy + half_h],
            [cx - half_w, cy + half_h],
        ])
    }

    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| cross(self.vertices[i], self.vertices[(i + 1) % n]))
            .sum::<f64>()
            * 0.5
    }

    pub fn transformed(&self, pose: &Pose) -> Polygon {
        Polygon {
            vertices: self.vertices.iter().map(|v| pose.transform_point(*v)).collect(),
        }
    }

    pub fn translated(&self, d: Vec2) -> Polygon {
        Polygon {
            vertices: self.vertices.iter().map(|v| [v[0] + d[0], v[1] + d[1]]).collect(),
        }
    }

    pub fn bounds(&self) -> (Vec2, Vec2) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for i in 0..2 {
                lo[i] = lo[i].min(v[i]);
                hi[i] = hi[i].max(v[i]);
            }
        }
        (lo, hi)
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            cross(sub(b, a), sub(p, a)) >= 0.0
        })
    }

    pub fn centroid(&self) -> Vec2 {
        let n = self.vertices.len() as f64;
        let s = self
            .vertices
            .iter()
            .fold([0.0, 0.0], |acc, v| [acc[0] + v[0], acc[1] + v[1]]);
        [s[0] / n, s[1] / n]
    }

    /// Contact between a circle and this polygon, reported when the gap is
    /// below `slop`.
    pub fn circle_contact(&self, center: Vec2, radius: f64, slop: f64) -> Option<Contact> {
        let n = self.vertices.len();
        let mut inside = true;
        let mut best_edge = (f64::NEG_INFINITY, [0.0, 0.0]);
        let mut closest = (f64::INFINITY, [0.0, 0.0]);
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let e = sub(b, a);
            let len = norm(e);
            let outward = [e[1] / len, -e[0] / len];
            let s = dot(sub(center, a), outward);
            if s > 0.0 {
                inside = false;
            }
            if s > best_edge.0 {
                best_edge = (s, outward);
            }
            let t = (dot(sub(center, a), e) / (len * len)).clamp(0.0, 1.0);
            let q = [a[0] + e[0] * t, a[1] + e[1] * t];
            let d = norm(sub(center, q));
            if d < closest.0 {
                closest = (d, q);
            }
        }
        if inside {
            let (s, normal) = best_edge;
            return Some(Contact {
                normal,
                depth: radius - s,
                point: [center[0] - normal[0] * s, center[1] - normal[1] * s],
            });
        }
        let (d, q) = closest;
        if d >= radius + slop {
            return None;
        }
        let normal = if d > 0.0 {
            [(center[0] - q[0]) / d, (center[1] - q[1]) / d]
        } else {
            best_edge.1
        };
        Some(Contact {
            normal,
            depth: radius - d,
            point: q,
        })
    }
}
