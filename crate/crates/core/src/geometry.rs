//! Planar geometry shared by the world model, protocol and metrics.
//!
//! World frame is a fixed Cartesian plane: East = +x, North = +y, headings
//! in radians counter-clockwise from +x.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

/// 2-vector in meters (positions) or m/s (velocities). Serializes as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2(pub f64, pub f64);

impl Vec2 {
    pub const ZERO: Vec2 = Vec2(0.0, 0.0);

    pub fn new(x: f64, y: f64) -> Self {
        Vec2(x, y)
    }

    pub fn x(self) -> f64 {
        self.0
    }

    pub fn y(self) -> f64 {
        self.1
    }

    pub fn from_heading(heading: f64) -> Self {
        Vec2(heading.cos(), heading.sin())
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.0 * other.0 + self.1 * other.1
    }

    pub fn cross(self, other: Vec2) -> f64 {
        self.0 * other.1 - self.1 * other.0
    }

    pub fn norm(self) -> f64 {
        self.0.hypot(self.1)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    pub fn angle(self) -> f64 {
        self.1.atan2(self.0)
    }

    pub fn is_finite(self) -> bool {
        self.0.is_finite() && self.1.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2(self.0 + o.0, self.1 + o.1)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2(self.0 - o.0, self.1 - o.1)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2(self.0 * k, self.1 * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2(-self.0, -self.1)
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Closest point on a polyline: returns (arc length at the projection, lateral distance).
pub fn project_onto_polyline(points: &[Vec2], p: Vec2) -> Option<(f64, f64)> {
    match points.len() {
        0 => None,
        1 => Some((0.0, p.distance(points[0]))),
        _ => {
            let mut best: Option<(f64, f64)> = None;
            let mut walked = 0.0;
            for seg in points.windows(2) {
                let (a, b) = (seg[0], seg[1]);
                let ab = b - a;
                let len = ab.norm();
                let t = if len > 0.0 {
                    ((p - a).dot(ab) / (len * len)).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let q = a + ab * t;
                let d = p.distance(q);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((walked + t * len, d));
                }
                walked += len;
            }
            best
        }
    }
}

pub fn polyline_length(points: &[Vec2]) -> f64 {
    points.windows(2).map(|w| w[0].distance(w[1])).sum()
}

/// Point at arc length `s` along the polyline, clamped to its ends.
pub fn point_at_arc(points: &[Vec2], s: f64) -> Option<Vec2> {
    let first = *points.first()?;
    if s <= 0.0 {
        return Some(first);
    }
    let mut walked = 0.0;
    for seg in points.windows(2) {
        let len = seg[0].distance(seg[1]);
        if walked + len >= s && len > 0.0 {
            return Some(seg[0] + (seg[1] - seg[0]) * ((s - walked) / len));
        }
        walked += len;
    }
    points.last().copied()
}

/// Axis-aligned rectangle, used for occlusion footprints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec2,
    pub max: Vec2,
}

impl Aabb {
    pub fn centered(center: Vec2, length: f64, width: f64) -> Self {
        let h = Vec2(length / 2.0, width / 2.0);
        Aabb {
            min: center - h,
            max: center + h,
        }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.0 >= self.min.0 && p.0 <= self.max.0 && p.1 >= self.min.1 && p.1 <= self.max.1
    }

    /// Slab test for the closed segment `a -> b`.
    pub fn intersects_segment(&self, a: Vec2, b: Vec2) -> bool {
        let d = b - a;
        let mut t0 = 0.0_f64;
        let mut t1 = 1.0_f64;
        for (origin, dir, lo, hi) in [
            (a.0, d.0, self.min.0, self.max.0),
            (a.1, d.1, self.min.1, self.max.1),
        ] {
            if dir.abs() < 1e-12 {
                if origin < lo || origin > hi {
                    return false;
                }
            } else {
                let (mut ta, mut tb) = ((lo - origin) / dir, (hi - origin) / dir);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }
}

/// Heading-aligned box footprint of a vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Vec2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    fn axes(&self) -> (Vec2, Vec2) {
        let fwd = Vec2::from_heading(self.heading);
        (fwd, Vec2(-fwd.1, fwd.0))
    }

    /// Half-extent of the box projected onto unit direction `dir`.
    pub fn support(&self, dir: Vec2) -> f64 {
        let (fwd, left) = self.axes();
        (self.length / 2.0) * fwd.dot(dir).abs() + (self.width / 2.0) * left.dot(dir).abs()
    }

    /// Separating-axis overlap test.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        let delta = other.center - self.center;
        let (a0, a1) = self.axes();
        let (b0, b1) = other.axes();
        [a0, a1, b0, b1]
            .into_iter()
            .all(|axis| delta.dot(axis).abs() <= self.support(axis) + other.support(axis))
    }

    /// Smallest axis-aligned box containing the footprint.
    pub fn bounding_box(&self) -> Aabb {
        let h = Vec2(self.support(Vec2(1.0, 0.0)), self.support(Vec2(0.0, 1.0)));
        Aabb {
            min: self.center - h,
            max: self.center + h,
        }
    }

    /// Center distance minus the two half-extents along the center line.
    /// Non-positive values mean contact along that line.
    pub fn clearance(&self, other: &OrientedBox) -> f64 {
        let delta = other.center - self.center;
        let dist = delta.norm();
        if dist < 1e-12 {
            return -(self.support(Vec2(1.0, 0.0)) + other.support(Vec2(1.0, 0.0)));
        }
        let dir = delta * (1.0 / dist);
        dist - self.support(dir) - other.support(dir)
    }
}
