//! Planar rigid transforms (SE(2)).
//!
//! A [`Pose`] is a translation in meters plus a heading in radians. Headings
//! are stored wrapped to `(-pi, pi]` after every operation and are never
//! accumulated unwrapped.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wrap an angle to `(-pi, pi]`. Angles already inside the interval are
/// returned unchanged (bit for bit).
pub fn wrap_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let two_pi = 2.0 * PI;
    let mut t = theta.rem_euclid(two_pi);
    if t > PI {
        t -= two_pi;
    }
    if t <= -PI {
        t += two_pi;
    }
    t
}

/// Shortest signed arc from `from` to `to`, in `(-pi, pi]`.
pub fn angle_diff(from: f64, to: f64) -> f64 {
    wrap_angle(to - from)
}

#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Pose({:.6}, {:.6}, {:.6})", self.x, self.y, self.theta)
    }
}

impl From<[f64; 3]> for Pose {
    fn from(v: [f64; 3]) -> Self {
        Pose::new(v[0], v[1], v[2])
    }
}

impl From<Pose> for [f64; 3] {
    fn from(p: Pose) -> Self {
        [p.x, p.y, p.theta]
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        x: 0.0,
        y: 0.0,
        theta: 0.0,
    };

    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn from_translation(x: f64, y: f64) -> Self {
        Pose { x, y, theta: 0.0 }
    }

    /// `self` followed by `other`, with `other` expressed in `self`'s frame.
    pub fn compose(&self, other: &Pose) -> Pose {
        let (s, c) = self.theta.sin_cos();
        Pose {
            x: self.x + (c * other.x - s * other.y),
            y: self.y + (s * other.x + c * other.y),
            theta: wrap_angle(self.theta + other.theta),
        }
    }

    pub fn inverse(&self) -> Pose {
        let (s, c) = self.theta.sin_cos();
        Pose {
            x: -(c * self.x + s * self.y),
            y: s * self.x - c * self.y,
            theta: wrap_angle(-self.theta),
        }
    }

    /// The pose of `to` expressed in the frame of `self`, so that
    /// `self.compose(&self.relative(to)) == to`.
    pub fn relative(&self, to: &Pose) -> Pose {
        let (s, c) = self.theta.sin_cos();
        let dx = to.x - self.x;
        let dy = to.y - self.y;
        Pose {
            x: c * dx + s * dy,
            y: -s * dx + c * dy,
            theta: angle_diff(self.theta, to.theta),
        }
    }

    /// Map a point given in this frame into the parent frame.
    pub fn transform_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Map a point given in the parent frame into this frame.
    pub fn inverse_transform_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn translation_norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn angular_distance(&self, other: &Pose) -> f64 {
        angle_diff(self.theta, other.theta).abs()
    }

    pub fn approx_eq(&self, other: &Pose, tol: &PoseTolerance) -> bool {
        self.translation_distance(other) <= tol.trans_tol
            && self.angular_distance(other) <= tol.rot_tol
    }

    /// Linear interpolation in translation and shortest-arc interpolation in
    /// heading. `t = 0` gives `self`, `t = 1` gives `to`.
    pub fn interpolate(&self, to: &Pose, t: f64) -> Pose {
        if t >= 1.0 {
            return *to;
        }
        Pose::new(
            self.x + (to.x - self.x) * t,
            self.y + (to.y - self.y) * t,
            self.theta + angle_diff(self.theta, to.theta) * t,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn inverse(p: &Pose) -> Pose {
    p.inverse()
}

pub fn relative(from: &Pose, to: &Pose) -> Pose {
    from.relative(to)
}

pub fn approx_eq(a: &Pose, b: &Pose, tol: &PoseTolerance) -> bool {
    a.approx_eq(b, tol)
}

/// Translation and rotation tolerances for pose equality. Both strictly
/// positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTolerance", into = "RawTolerance")]
pub struct PoseTolerance {
    trans_tol: f64,
    rot_tol: f64,
}

#[derive(Serialize, Deserialize)]
struct RawTolerance {
    trans_tol: f64,
    rot_tol: f64,
}

impl TryFrom<RawTolerance> for PoseTolerance {
    type Error = Error;
    fn try_from(r: RawTolerance) -> Result<Self> {
        PoseTolerance::new(r.trans_tol, r.rot_tol)
    }
}

impl From<PoseTolerance> for RawTolerance {
    fn from(t: PoseTolerance) -> Self {
        RawTolerance {
            trans_tol: t.trans_tol,
            rot_tol: t.rot_tol,
        }
    }
}

impl PoseTolerance {
    pub fn new(trans_tol: f64, rot_tol: f64) -> Result<Self> {
        if !(trans_tol > 0.0 && rot_tol > 0.0) || !trans_tol.is_finite() || !rot_tol.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "pose tolerance must be strictly positive, got ({trans_tol}, {rot_tol})"
            )));
        }
        Ok(PoseTolerance { trans_tol, rot_tol })
    }

    pub fn trans_tol(&self) -> f64 {
        self.trans_tol
    }

    pub fn rot_tol(&self) -> f64 {
        self.rot_tol
    }
}

impl Default for PoseTolerance {
    /// 1 mm and 0.5 degrees.
    fn default() -> Self {
        PoseTolerance {
            trans_tol: 1e-3,
            rot_tol: 0.5_f64.to_radians(),
        }
    }
}
