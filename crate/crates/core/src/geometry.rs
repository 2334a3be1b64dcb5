//! Planar vector math in the path frame.
//!
//! The path frame has +Y along the nominal walking path and +X to the
//! subject's right. Headings and bearings are in degrees measured from +Y,
//! positive clockwise (to the right).

use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Unit vector pointing along `heading_deg` (0 = +Y, 90 = +X).
    pub fn from_heading(heading_deg: f64) -> Self {
        let h = heading_deg.to_radians();
        Self::new(h.sin(), h.cos())
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    /// Returns `None` for the zero vector.
    pub fn normalized(self) -> Option<Vec2> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self * (1.0 / n))
    }

    /// Heading of this vector in degrees, normalized to (-180, 180].
    pub fn heading_deg(self) -> f64 {
        normalize_deg(self.x.atan2(self.y).to_degrees())
    }

    pub fn mirror_x(self) -> Vec2 {
        Vec2::new(-self.x, self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, rhs: Vec2) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Normalizes an angle in degrees to (-180, 180].
pub fn normalize_deg(a: f64) -> f64 {
    let mut r = a % 360.0;
    if r <= -180.0 {
        r += 360.0;
    } else if r > 180.0 {
        r -= 360.0;
    }
    r
}

/// Bearing of `target` as seen from `from`, relative to `reference_heading_deg`.
pub fn relative_bearing_deg(from: Vec2, reference_heading_deg: f64, target: Vec2) -> f64 {
    normalize_deg((target - from).heading_deg() - reference_heading_deg)
}

/// Closest point of approach between two constant-velocity points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Approach {
    /// Time of closest approach, clamped to `t >= 0`.
    pub time: f64,
    pub distance: f64,
}

/// Closest approach of points `p + v t` and `q + w t` over `t >= 0`.
pub fn closest_approach(p: Vec2, v: Vec2, q: Vec2, w: Vec2) -> Approach {
    closest_approach_within(p, v, q, w, f64::INFINITY)
}

/// Closest approach restricted to `t` in `[0, horizon]`.
pub fn closest_approach_within(p: Vec2, v: Vec2, q: Vec2, w: Vec2, horizon: f64) -> Approach {
    let r = q - p;
    let dv = w - v;
    let dv2 = dv.norm_sq();
    let t = if dv2 <= f64::EPSILON {
        0.0
    } else {
        (-r.dot(dv) / dv2).clamp(0.0, horizon)
    };
    Approach {
        time: t,
        distance: (r + dv * t).norm(),
    }
}

/// First time `t >= 0` at which the points come closer than `radius`, if ever.
pub fn time_to_contact(p: Vec2, v: Vec2, q: Vec2, w: Vec2, radius: f64) -> Option<f64> {
    let r = q - p;
    let dv = w - v;
    let c = r.norm_sq() - radius * radius;
    if c < 0.0 {
        return Some(0.0);
    }
    let a = dv.norm_sq();
    let b = 2.0 * r.dot(dv);
    if a <= f64::EPSILON || b >= 0.0 {
        return None;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    Some((-b - disc.sqrt()) / (2.0 * a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_wraps_into_half_open_interval() {
        assert_eq!(normalize_deg(180.0), 180.0);
        assert_eq!(normalize_deg(-180.0), 180.0);
        assert_eq!(normalize_deg(190.0), -170.0);
        assert_eq!(normalize_deg(-190.0), 170.0);
        assert_eq!(normalize_deg(720.0), 0.0);
    }

    #[test]
    fn heading_convention() {
        assert!((Vec2::new(1.0, 0.0).heading_deg() - 90.0).abs() < 1e-12);
        assert!((Vec2::new(-1.0, 0.0).heading_deg() + 90.0).abs() < 1e-12);
        let u = Vec2::from_heading(30.0);
        assert!((u.heading_deg() - 30.0).abs() < 1e-12);
        assert!(u.x > 0.0);
    }

    #[test]
    fn head_on_closest_approach() {
        let a = closest_approach(
            Vec2::ZERO,
            Vec2::new(0.0, 1.0),
            Vec2::new(0.0, 10.0),
            Vec2::new(0.0, -1.0),
        );
        assert!((a.time - 5.0).abs() < 1e-12);
        assert!(a.distance < 1e-12);
    }

    #[test]
    fn contact_time_head_on() {
        let t = time_to_contact(
            Vec2::ZERO,
            Vec2::new(0.0, 1.0),
            Vec2::new(0.0, 10.0),
            Vec2::new(0.0, -1.0),
            0.5,
        );
        assert!((t.unwrap() - 4.75).abs() < 1e-12);
        let parallel = time_to_contact(
            Vec2::ZERO,
            Vec2::new(0.0, 1.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(0.0, 1.0),
            0.5,
        );
        assert_eq!(parallel, None);
    }

    #[test]
    fn receding_points_clamp_to_now() {
        let a = closest_approach(
            Vec2::ZERO,
            Vec2::new(0.0, -1.0),
            Vec2::new(0.0, 2.0),
            Vec2::new(0.0, 1.0),
        );
        assert_eq!(a.time, 0.0);
        assert!((a.distance - 2.0).abs() < 1e-12);
    }
}
