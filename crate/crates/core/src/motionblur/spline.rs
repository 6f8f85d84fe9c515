//! Curved motion interpolation: per-pixel instantaneous flow, the cubic
//! Hermite path between frame positions, and flow extrapolation past the
//! burst endpoints.

use crate::geom::Vec2;

/// Instantaneous flow at a frame from its incoming and outgoing segments,
/// both oriented forward in time.
///
/// The vector is parallel to `incoming + outgoing` with magnitude the
/// harmonic mean of the two lengths, scaled by `theta / sin(theta)` for the
/// angular deviation `theta` from a straight path, tapered back to zero as
/// the path doubles back. The taper is evaluated first so the `theta /
/// sin(theta)` singularity at a full reversal is never touched; either
/// segment being zero yields zero.
pub fn instantaneous_flow(incoming: Vec2, outgoing: Vec2) -> Vec2 {
    let len_in = incoming.norm() as f64;
    let len_out = outgoing.norm() as f64;
    if len_in <= 0.0 || len_out <= 0.0 {
        return Vec2::ZERO;
    }
    let cos_theta = ((incoming.dot(outgoing) as f64) / (len_in * len_out)).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();

    let taper = if theta <= std::f64::consts::FRAC_PI_2 {
        1.0
    } else {
        1.0 - (2.0 * theta / std::f64::consts::PI - 1.0).powi(4)
    };
    if taper < 1e-6 {
        return Vec2::ZERO;
    }
    // theta / sin(theta), by series near zero.
    let stretch = if theta < 1e-3 {
        1.0 + theta * theta / 6.0
    } else {
        theta / theta.sin()
    };
    let harmonic = 2.0 * len_in * len_out / (len_in + len_out);
    let dir = (incoming + outgoing).normalized();
    dir * (harmonic * stretch * taper) as f32
}

/// Cubic Hermite path `rho(t)` with endpoint positions and tangents.
#[derive(Debug, Clone, Copy)]
pub struct HermitePath {
    pub p0: Vec2,
    pub p1: Vec2,
    pub m0: Vec2,
    pub m1: Vec2,
}

impl HermitePath {
    /// Path from `start` spanning `delta`, with instantaneous-flow tangents
    /// at both ends.
    pub fn new(start: Vec2, delta: Vec2, tangent_start: Vec2, tangent_end: Vec2) -> Self {
        HermitePath {
            p0: start,
            p1: start + delta,
            m0: tangent_start,
            m1: tangent_end,
        }
    }

    /// Straight-line path (tangents equal the chord).
    pub fn linear(start: Vec2, delta: Vec2) -> Self {
        HermitePath {
            p0: start,
            p1: start + delta,
            m0: delta,
            m1: delta,
        }
    }

    pub fn eval(&self, t: f32) -> Vec2 {
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        self.p0 * h00 + self.m0 * h10 + self.p1 * h01 + self.m1 * h11
    }

    pub fn deriv(&self, t: f32) -> Vec2 {
        let t2 = t * t;
        let d00 = 6.0 * t2 - 6.0 * t;
        let d10 = 3.0 * t2 - 4.0 * t + 1.0;
        let d01 = -6.0 * t2 + 6.0 * t;
        let d11 = 3.0 * t2 - 2.0 * t;
        self.p0 * d00 + self.m0 * d10 + self.p1 * d01 + self.m1 * d11
    }
}

/// Extrapolate the next position past the end of a burst from the last three
/// positions: reflect `a` in the perpendicular bisector of `bc`, then clamp
/// the step length to `|bc|`. Degenerate `b == c` stays at `c`.
pub fn extrapolate_flow_endpoint(a: Vec2, b: Vec2, c: Vec2) -> Vec2 {
    let bc = c - b;
    let len_bc = bc.norm();
    if len_bc <= 1e-12 {
        return c;
    }
    // The bisecting line passes through the midpoint of bc, perpendicular to
    // it; reflecting a point p across it: mirror the component along bc.
    let mid = (b + c) * 0.5;
    let dir = bc / len_bc;
    let rel = a - mid;
    let reflected = mid + (rel - dir * (2.0 * rel.dot(dir)));
    let step = (reflected - c).clamp_norm(len_bc);
    c + step
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn straight_path_keeps_magnitude() {
        let d = instantaneous_flow(Vec2::new(4.0, 0.0), Vec2::new(4.0, 0.0));
        assert!((d - Vec2::new(4.0, 0.0)).norm() < 1e-5);
    }

    #[test]
    fn collinear_unequal_lengths_use_harmonic_mean() {
        let d = instantaneous_flow(Vec2::new(2.0, 0.0), Vec2::new(6.0, 0.0));
        assert!((d.norm() - 3.0).abs() < 1e-5, "got {}", d.norm());
        assert!(d.y.abs() < 1e-6);
    }

    #[test]
    fn full_reversal_tapers_to_zero() {
        let d = instantaneous_flow(Vec2::new(4.0, 0.0), Vec2::new(-4.0, 0.0));
        assert_eq!(d, Vec2::ZERO);
    }

    #[test]
    fn zero_segment_gives_zero() {
        assert_eq!(
            instantaneous_flow(Vec2::ZERO, Vec2::new(3.0, 1.0)),
            Vec2::ZERO
        );
        assert_eq!(
            instantaneous_flow(Vec2::new(3.0, 1.0), Vec2::ZERO),
            Vec2::ZERO
        );
    }

    #[test]
    fn right_angle_turn_scales_by_theta_over_sin() {
        // 90 degrees: theta/sin(theta) = pi/2, taper = 1.
        let d = instantaneous_flow(Vec2::new(4.0, 0.0), Vec2::new(0.0, 4.0));
        let expected_mag = 4.0 * std::f32::consts::FRAC_PI_2;
        assert!((d.norm() - expected_mag).abs() < 1e-4, "got {}", d.norm());
        // Direction bisects the turn.
        let dir = d.normalized();
        assert!((dir.x - dir.y).abs() < 1e-5);
    }

    #[test]
    fn hermite_constant_velocity_degenerates_to_line() {
        let c = Vec2::new(3.0, 0.0);
        let path = HermitePath::new(Vec2::new(1.0, 2.0), c, c, c);
        for i in 0..=10 {
            let t = i as f32 / 10.0;
            let p = path.eval(t);
            assert!((p - Vec2::new(1.0 + 3.0 * t, 2.0)).norm() < 1e-5);
            assert!((path.deriv(t) - c).norm() < 1e-5);
        }
    }

    #[test]
    fn hermite_constraints_hold_exactly() {
        let path = HermitePath::new(
            Vec2::new(5.0, 5.0),
            Vec2::new(8.0, -2.0),
            Vec2::new(2.0, 6.0),
            Vec2::new(7.0, 1.0),
        );
        assert!((path.eval(0.0) - path.p0).norm() < 1e-6);
        assert!((path.eval(1.0) - path.p1).norm() < 1e-6);
        assert!((path.deriv(0.0) - path.m0).norm() < 1e-5);
        assert!((path.deriv(1.0) - path.m1).norm() < 1e-5);
    }

    #[test]
    fn hermite_matches_bezier_de_casteljau_oracle() {
        // A 90-degree turn configuration, checked against the equivalent
        // cubic Bezier evaluated by de Casteljau subdivision.
        let path = HermitePath::new(
            Vec2::new(0.0, 0.0),
            Vec2::new(10.0, 10.0),
            Vec2::new(12.0, 0.0),
            Vec2::new(0.0, 12.0),
        );
        let b0 = path.p0;
        let b1 = path.p0 + path.m0 / 3.0;
        let b2 = path.p1 - path.m1 / 3.0;
        let b3 = path.p1;
        let de_casteljau = |t: f32| {
            let lerp = |a: Vec2, b: Vec2| a + (b - a) * t;
            let q0 = lerp(b0, b1);
            let q1 = lerp(b1, b2);
            let q2 = lerp(b2, b3);
            let r0 = lerp(q0, q1);
            let r1 = lerp(q1, q2);
            lerp(r0, r1)
        };
        for i in 0..=20 {
            let t = i as f32 / 20.0;
            assert!((path.eval(t) - de_casteljau(t)).norm() < 1e-4);
        }
    }

    #[test]
    fn extrapolation_collinear_equal_spacing() {
        let d = extrapolate_flow_endpoint(
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(2.0, 0.0),
        );
        assert!((d - Vec2::new(3.0, 0.0)).norm() < 1e-6);
    }

    #[test]
    fn extrapolation_degenerate_b_equals_c() {
        let c = Vec2::new(4.0, 1.0);
        assert_eq!(extrapolate_flow_endpoint(Vec2::new(0.0, 0.0), c, c), c);
    }

    #[test]
    fn extrapolation_preserves_turning_curvature() {
        // Three points on a circle keep turning the same way.
        let r = 10.0f32;
        let ang = |deg: f32| {
            let a = deg.to_radians();
            Vec2::new(r * a.cos(), r * a.sin())
        };
        let (a, b, c) = (ang(0.0), ang(30.0), ang(60.0));
        let d = extrapolate_flow_endpoint(a, b, c);
        // d should land near the 90-degree point.
        assert!((d - ang(90.0)).norm() < 0.5, "d = {:?}", d);
    }

    proptest! {
        #[test]
        fn extrapolated_step_never_exceeds_bc(
            ax in -10.0f32..10.0, ay in -10.0f32..10.0,
            bx in -10.0f32..10.0, by in -10.0f32..10.0,
            cx in -10.0f32..10.0, cy in -10.0f32..10.0,
        ) {
            let a = Vec2::new(ax, ay);
            let b = Vec2::new(bx, by);
            let c = Vec2::new(cx, cy);
            let d = extrapolate_flow_endpoint(a, b, c);
            prop_assert!((d - c).norm() <= (c - b).norm() + 1e-4);
        }

        #[test]
        fn instantaneous_flow_parallel_to_sum(
            ix in -5.0f32..5.0, iy in -5.0f32..5.0,
            ox in -5.0f32..5.0, oy in -5.0f32..5.0,
        ) {
            let inc = Vec2::new(ix, iy);
            let out = Vec2::new(ox, oy);
            let d = instantaneous_flow(inc, out);
            let sum = inc + out;
            if d.norm() > 1e-6 && sum.norm() > 1e-3 {
                let cross = (d.normalized()).cross(sum.normalized()).abs();
                prop_assert!(cross < 1e-3, "not parallel: {cross}");
            }
        }
    }
}
