//! Small 2-d geometry types shared across the pipeline.

use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f32,
    pub y: f32,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f32, y: f32) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, o: Vec2) -> f32 {
        self.x * o.x + self.y * o.y
    }

    /// 2-d cross product (z component of the 3-d cross).
    pub fn cross(self, o: Vec2) -> f32 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f32 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f32 {
        self.x * self.x + self.y * self.y
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        if n > 0.0 {
            self / n
        } else {
            Vec2::ZERO
        }
    }

    /// Clamp the magnitude to `max`, preserving direction.
    pub fn clamp_norm(self, max: f32) -> Vec2 {
        let n = self.norm();
        if n > max && n > 0.0 {
            self * (max / n)
        } else {
            self
        }
    }

    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f32> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f32) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Div<f32> for Vec2 {
    type Output = Vec2;
    fn div(self, s: f32) -> Vec2 {
        Vec2::new(self.x / s, self.y / s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Uniform-scale rotation + translation, applied as `x' = s * R(theta) * x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity2D {
    pub scale: f32,
    /// Rotation angle in radians (roll).
    pub theta: f32,
    pub t: Vec2,
}

impl Default for Similarity2D {
    fn default() -> Self {
        Similarity2D::identity()
    }
}

impl Similarity2D {
    pub fn identity() -> Self {
        Similarity2D {
            scale: 1.0,
            theta: 0.0,
            t: Vec2::ZERO,
        }
    }

    pub fn new(scale: f32, theta: f32, t: Vec2) -> Self {
        Similarity2D { scale, theta, t }
    }

    pub fn apply(&self, p: Vec2) -> Vec2 {
        let (sin, cos) = self.theta.sin_cos();
        Vec2::new(
            self.scale * (cos * p.x - sin * p.y) + self.t.x,
            self.scale * (sin * p.x + cos * p.y) + self.t.y,
        )
    }

    pub fn inverse(&self) -> Similarity2D {
        // x' = sRx + t  =>  x = (1/s) R^-1 (x' - t)
        let inv_scale = 1.0 / self.scale;
        let inv = Similarity2D {
            scale: inv_scale,
            theta: -self.theta,
            t: Vec2::ZERO,
        };
        let t = inv.apply(-self.t);
        Similarity2D {
            scale: inv_scale,
            theta: -self.theta,
            t,
        }
    }

    /// self ∘ other: apply `other` first, then `self`.
    pub fn compose(&self, other: &Similarity2D) -> Similarity2D {
        let t = self.apply(other.t);
        Similarity2D {
            scale: self.scale * other.scale,
            theta: self.theta + other.theta,
            t,
        }
    }

    /// Rescale to a coordinate space `factor` times larger.
    ///
    /// If `T` maps points at one resolution, the returned transform maps the
    /// same points with coordinates multiplied by `factor`: scale and rotation
    /// are unchanged, translation scales.
    pub fn scaled_space(&self, factor: f32) -> Similarity2D {
        Similarity2D {
            scale: self.scale,
            theta: self.theta,
            t: self.t * factor,
        }
    }

    /// Max pixel deviation from identity over a `w` x `h` region, a cheap
    /// "how far from identity" measure used in fixed-point tests.
    pub fn deviation_from_identity(&self, w: f32, h: f32) -> f32 {
        let corners = [
            Vec2::new(0.0, 0.0),
            Vec2::new(w, 0.0),
            Vec2::new(0.0, h),
            Vec2::new(w, h),
        ];
        corners
            .iter()
            .map(|&c| (self.apply(c) - c).norm())
            .fold(0.0, f32::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_round_trip() {
        let t = Similarity2D::new(1.3, 0.4, Vec2::new(5.0, -2.0));
        let p = Vec2::new(3.0, 7.0);
        let q = t.inverse().apply(t.apply(p));
        assert!((q - p).norm() < 1e-4);
    }

    #[test]
    fn compose_matches_sequential_apply() {
        let a = Similarity2D::new(1.1, 0.2, Vec2::new(1.0, 2.0));
        let b = Similarity2D::new(0.9, -0.5, Vec2::new(-3.0, 0.5));
        let p = Vec2::new(4.0, -1.0);
        let via_compose = a.compose(&b).apply(p);
        let sequential = a.apply(b.apply(p));
        assert!((via_compose - sequential).norm() < 1e-4);
    }

    #[test]
    fn scaled_space_commutes_with_coordinate_scaling() {
        let t = Similarity2D::new(1.05, 0.1, Vec2::new(2.0, -1.0));
        let p = Vec2::new(3.0, 5.0);
        let lhs = t.scaled_space(4.0).apply(p * 4.0);
        let rhs = t.apply(p) * 4.0;
        assert!((lhs - rhs).norm() < 1e-4);
    }
}
