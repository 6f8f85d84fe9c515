//! Regularized subject alignment for background blur.
//!
//! Transforms are estimated incrementally, one frame pair at a time, by
//! minimizing `lambda_f * E_f + lambda_b * E_b`:
//!
//! * `E_f` pins the subject: the L2 norm (unsquared) of the reprojection
//!   error of subject correspondences against their base-frame anchors.
//! * `E_b` keeps each background track's new aligned displacement parallel
//!   to its accumulated displacement, via a smooth-L1 loss on
//!   `1 - cos(angle)` so the term is minimized at parallel.
//!
//! The first pair carries no temporal term; its scale and rotation come from
//! the closed-form joint estimate with the roll clamped to a fraction of its
//! estimated value, then scale and translation are refit with the roll held.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{estimate_global_similarity, refit_scale_translation};
use crate::error::{Error, Result};
use crate::geom::{Similarity2D, Vec2};
use crate::tracking::TrackSet;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverParams {
    pub lambda_f: f32,
    pub lambda_b: f32,
    /// Fraction of the estimated roll applied on the first pair.
    pub roll_fraction: f32,
    pub max_iters: usize,
    pub tol: f64,
    /// Background flow vectors shorter than this are dropped from E_b.
    pub min_flow_px: f32,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            lambda_f: 1.0,
            lambda_b: 10.0,
            roll_fraction: 0.25,
            max_iters: 50,
            tol: 1e-8,
            min_flow_px: 0.25,
        }
    }
}

/// Robust loss: quadratic near zero, linear beyond |x| = 1.
pub fn smooth_l1(x: f32) -> f32 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

#[derive(Clone, Copy)]
struct P64 {
    x: f64,
    y: f64,
}

impl From<Vec2> for P64 {
    fn from(v: Vec2) -> Self {
        P64 {
            x: v.x as f64,
            y: v.y as f64,
        }
    }
}

#[derive(Clone, Copy)]
struct Sim64 {
    s: f64,
    theta: f64,
    tx: f64,
    ty: f64,
}

impl Sim64 {
    fn apply(&self, p: P64) -> P64 {
        let (sin, cos) = self.theta.sin_cos();
        P64 {
            x: self.s * (cos * p.x - sin * p.y) + self.tx,
            y: self.s * (sin * p.x + cos * p.y) + self.ty,
        }
    }

    fn to_similarity(self) -> Similarity2D {
        Similarity2D::new(
            self.s as f32,
            self.theta as f32,
            Vec2::new(self.tx as f32, self.ty as f32),
        )
    }
}

/// One pair's optimization problem: subject anchors and background
/// parallelism references, all in base-frame space.
struct PairProblem {
    /// (point in the new frame, anchor in base space)
    subject: Vec<(P64, P64)>,
    /// (point in the new frame, previous aligned position, accumulated flow)
    background: Vec<(P64, P64, P64)>,
    lambda_f: f64,
    lambda_b: f64,
    min_flow: f64,
}

impl PairProblem {
    fn smooth_l1_64(x: f64) -> f64 {
        let a = x.abs();
        if a < 1.0 {
            0.5 * x * x
        } else {
            a - 0.5
        }
    }

    /// Residual of one background term: 1 - cos(angle between the previous
    /// accumulated flow and the new segment). Degenerate vectors contribute 0.
    fn bg_term(&self, t: &Sim64, entry: &(P64, P64, P64)) -> f64 {
        let (p_new, prev_pos, v_prev) = entry;
        let mapped = t.apply(*p_new);
        let vx = mapped.x - prev_pos.x;
        let vy = mapped.y - prev_pos.y;
        let n_new = (vx * vx + vy * vy).sqrt();
        let n_prev = (v_prev.x * v_prev.x + v_prev.y * v_prev.y).sqrt();
        if n_new < self.min_flow || n_prev < self.min_flow {
            return 0.0;
        }
        1.0 - (vx * v_prev.x + vy * v_prev.y) / (n_new * n_prev)
    }

    fn subject_residual(&self, t: &Sim64, entry: &(P64, P64)) -> (f64, f64) {
        let mapped = t.apply(entry.0);
        (entry.1.x - mapped.x, entry.1.y - mapped.y)
    }

    fn cost(&self, t: &Sim64) -> f64 {
        let mut c = 0.0;
        for e in &self.subject {
            let (dx, dy) = self.subject_residual(t, e);
            c += self.lambda_f * (dx * dx + dy * dy).sqrt();
        }
        for e in &self.background {
            c += self.lambda_b * Self::smooth_l1_64(self.bg_term(t, e));
        }
        c
    }

    /// Damped Gauss-Newton with IRLS weights and numerical Jacobians.
    fn solve(&self, init: Sim64, params: &SolverParams, pair: usize) -> Result<Sim64> {
        let mut t = init;
        let mut cost = self.cost(&t);
        if !cost.is_finite() {
            return Err(Error::SolverDiverged { pair });
        }
        let mut lm = 1e-3f64;
        let n_res = self.subject.len() * 2 + self.background.len();
        if n_res == 0 {
            return Ok(t);
        }
        let h = 1e-6f64;

        for _ in 0..params.max_iters {
            // Frozen robust weights at the current iterate.
            let mut sub_w = Vec::with_capacity(self.subject.len());
            for e in &self.subject {
                let (dx, dy) = self.subject_residual(&t, e);
                let norm = (dx * dx + dy * dy).sqrt().max(1e-9);
                sub_w.push((self.lambda_f / norm).sqrt());
            }
            let mut bg_w = Vec::with_capacity(self.background.len());
            for e in &self.background {
                let z = self.bg_term(&t, e);
                let w = if z.abs() < 1.0 {
                    0.5
                } else {
                    (z.abs() - 0.5) / (z * z).max(1e-12)
                };
                bg_w.push((self.lambda_b * w).sqrt());
            }

            let eval = |t: &Sim64| -> DVector<f64> {
                let mut r = DVector::zeros(n_res);
                let mut i = 0;
                for (e, w) in self.subject.iter().zip(&sub_w) {
                    let (dx, dy) = self.subject_residual(t, e);
                    r[i] = w * dx;
                    r[i + 1] = w * dy;
                    i += 2;
                }
                for (e, w) in self.background.iter().zip(&bg_w) {
                    r[i] = w * self.bg_term(t, e);
                    i += 1;
                }
                r
            };

            let r0 = eval(&t);
            let mut jac = DMatrix::zeros(n_res, 4);
            for p in 0..4 {
                let mut tp = t;
                let mut tm = t;
                match p {
                    0 => {
                        tp.s += h;
                        tm.s -= h;
                    }
                    1 => {
                        tp.theta += h;
                        tm.theta -= h;
                    }
                    2 => {
                        tp.tx += h;
                        tm.tx -= h;
                    }
                    _ => {
                        tp.ty += h;
                        tm.ty -= h;
                    }
                }
                let rp = eval(&tp);
                let rm = eval(&tm);
                for i in 0..n_res {
                    jac[(i, p)] = (rp[i] - rm[i]) / (2.0 * h);
                }
            }

            let a = jac.transpose() * &jac;
            let g = jac.transpose() * &r0;
            let mut step_norm = 0.0;
            let mut accepted = false;
            for _ in 0..12 {
                let mut damped = a.clone();
                for d in 0..4 {
                    damped[(d, d)] += lm * damped[(d, d)].max(1e-12);
                }
                let Some(delta) = damped.lu().solve(&(-&g)) else {
                    lm *= 4.0;
                    continue;
                };
                let cand = Sim64 {
                    s: t.s + delta[0],
                    theta: t.theta + delta[1],
                    tx: t.tx + delta[2],
                    ty: t.ty + delta[3],
                };
                let c = self.cost(&cand);
                if !c.is_finite() {
                    return Err(Error::SolverDiverged { pair });
                }
                if c < cost {
                    t = cand;
                    cost = c;
                    step_norm = delta.norm();
                    lm = (lm / 3.0).max(1e-12);
                    accepted = true;
                    break;
                }
                lm *= 4.0;
            }
            if !accepted || step_norm < params.tol {
                break;
            }
        }
        if !(t.s.is_finite() && t.theta.is_finite() && t.tx.is_finite() && t.ty.is_finite()) {
            return Err(Error::SolverDiverged { pair });
        }
        Ok(t)
    }
}

/// Solve per-frame similarity transforms mapping each processed frame into
/// base space. Track coordinates must already be globally aligned; subject
/// and background are disjoint index sets into `set.tracks`.
pub fn solve_background_alignment(
    set: &TrackSet,
    subject: &[usize],
    background: &[usize],
    params: &SolverParams,
) -> Result<Vec<Similarity2D>> {
    assert!(
        params.lambda_f >= 0.0 && params.lambda_b >= 0.0,
        "term weights must be non-negative"
    );
    let n = set.n_frames;
    let mut transforms = vec![Similarity2D::identity(); n];
    if n < 2 {
        return Ok(transforms);
    }
    if subject.is_empty() {
        return Err(Error::NoSubjectTracks);
    }

    for k in 1..n {
        let j = k - 1;
        // Subject anchors: base-frame position when the track reaches back to
        // frame 0, otherwise the previous aligned position.
        let mut subj_corr: Vec<(Vec2, Vec2)> = Vec::new();
        for &ti in subject {
            let track = &set.tracks[ti];
            let Some(pk) = track.position(k) else {
                continue;
            };
            let anchor = match track.position(0) {
                Some(p0) => p0,
                None => match track.position(j) {
                    Some(pj) => transforms[j].apply(pj),
                    None => continue,
                },
            };
            subj_corr.push((pk, anchor));
        }
        if subj_corr.len() < 2 {
            return Err(Error::NoSubjectTracks);
        }

        if k == 1 {
            // First pair: integrated scale/rotation estimate, roll clamped.
            let w = vec![1.0; subj_corr.len()];
            let est = estimate_global_similarity(&subj_corr, &w)?;
            let clamped_roll = params.roll_fraction * est.theta;
            transforms[k] = refit_scale_translation(&subj_corr, &w, clamped_roll)?;
            continue;
        }

        // Background parallelism references, valid over frames {0, j, k}.
        let mut bg_entries: Vec<(P64, P64, P64)> = Vec::new();
        for &ti in background {
            let track = &set.tracks[ti];
            let (Some(p0), Some(pj), Some(pk)) =
                (track.position(0), track.position(j), track.position(k))
            else {
                continue;
            };
            let prev_pos = transforms[j].apply(pj);
            let v_prev = prev_pos - p0;
            if v_prev.norm() < params.min_flow_px {
                continue;
            }
            bg_entries.push((pk.into(), prev_pos.into(), v_prev.into()));
        }

        let problem = PairProblem {
            subject: subj_corr
                .iter()
                .map(|&(a, b)| (a.into(), b.into()))
                .collect(),
            background: bg_entries,
            lambda_f: params.lambda_f as f64,
            lambda_b: params.lambda_b as f64,
            min_flow: params.min_flow_px as f64,
        };

        // Initialize from the pure subject fit, falling back to the previous
        // transform for degenerate geometry.
        let w = vec![1.0; subj_corr.len()];
        let init = estimate_global_similarity(&subj_corr, &w).unwrap_or(transforms[j]);
        let init64 = Sim64 {
            s: init.scale as f64,
            theta: init.theta as f64,
            tx: init.t.x as f64,
            ty: init.t.y as f64,
        };
        transforms[k] = problem.solve(init64, params, k)?.to_similarity();
    }
    Ok(transforms)
}

/// Standard deviation of aligned background streak directions, in radians,
/// measured as deviations from the circular mean direction. A diagnostic for
/// how consistent the background blur field is.
pub fn streak_angle_std(set: &TrackSet, background: &[usize], transforms: &[Similarity2D]) -> f32 {
    let mut segments: Vec<Vec2> = Vec::new();
    for &ti in background {
        let track = &set.tracks[ti];
        for k in 1..transforms.len() {
            let (Some(pa), Some(pb)) = (track.position(k - 1), track.position(k)) else {
                continue;
            };
            let seg = transforms[k].apply(pb) - transforms[k - 1].apply(pa);
            if seg.norm() > 0.25 {
                segments.push(seg);
            }
        }
    }
    if segments.len() < 2 {
        return 0.0;
    }
    let mean_dir = segments
        .iter()
        .fold(Vec2::ZERO, |a, s| a + s.normalized())
        .normalized();
    let deviations: Vec<f32> = segments
        .iter()
        .map(|s| mean_dir.cross(*s).atan2(mean_dir.dot(*s)))
        .collect();
    let mean = deviations.iter().sum::<f32>() / deviations.len() as f32;
    (deviations.iter().map(|d| (d - mean).powi(2)).sum::<f32>() / deviations.len() as f32).sqrt()
}

/// Total subject sharpness term at given transforms (for invariant checks).
pub fn subject_energy(set: &TrackSet, subject: &[usize], transforms: &[Similarity2D]) -> f32 {
    let mut e = 0.0;
    for &ti in subject {
        let track = &set.tracks[ti];
        let Some(p0) = track.position(0) else {
            continue;
        };
        for (k, t) in transforms.iter().enumerate().skip(1) {
            if let Some(pk) = track.position(k) {
                e += (p0 - t.apply(pk)).norm();
            }
        }
    }
    e
}
