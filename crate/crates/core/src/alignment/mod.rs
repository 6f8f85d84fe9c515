//! Image alignment: global similarity estimation, foreground-blur mesh
//! refinement and the background-blur subject alignment solver.

mod cluster;
mod mesh;
mod solver;

pub use cluster::{cluster_subject_tracks, ClusterParams};
pub use mesh::{refine_mesh_foreground, MeshParams, MeshWarp};
pub use solver::{smooth_l1, solve_background_alignment, streak_angle_std, subject_energy, SolverParams};

use crate::error::{Error, Result};
use crate::geom::{Similarity2D, Vec2};
use crate::image_buf::ImageBuf;
use crate::tracking::TrackSet;

/// Weighted least-squares similarity transform mapping `src` points onto
/// `dst` points (closed form, scale and rotation estimated jointly).
pub fn estimate_global_similarity(
    correspondences: &[(Vec2, Vec2)],
    weights: &[f32],
) -> Result<Similarity2D> {
    assert_eq!(correspondences.len(), weights.len());
    if correspondences.len() < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 correspondences, got {}",
            correspondences.len()
        )));
    }
    let wsum: f64 = weights.iter().map(|&w| w as f64).sum();
    if wsum <= 0.0 {
        return Err(Error::Degenerate("all weights are zero".into()));
    }
    let mut mu_s = (0.0f64, 0.0f64);
    let mut mu_d = (0.0f64, 0.0f64);
    for ((s, d), &w) in correspondences.iter().zip(weights) {
        let w = w as f64;
        mu_s.0 += w * s.x as f64;
        mu_s.1 += w * s.y as f64;
        mu_d.0 += w * d.x as f64;
        mu_d.1 += w * d.y as f64;
    }
    mu_s.0 /= wsum;
    mu_s.1 /= wsum;
    mu_d.0 /= wsum;
    mu_d.1 /= wsum;

    let mut dot = 0.0f64;
    let mut cross = 0.0f64;
    let mut src_sq = 0.0f64;
    for ((s, d), &w) in correspondences.iter().zip(weights) {
        let w = w as f64;
        let sx = s.x as f64 - mu_s.0;
        let sy = s.y as f64 - mu_s.1;
        let dx = d.x as f64 - mu_d.0;
        let dy = d.y as f64 - mu_d.1;
        dot += w * (sx * dx + sy * dy);
        cross += w * (sx * dy - sy * dx);
        src_sq += w * (sx * sx + sy * sy);
    }
    if src_sq < 1e-12 {
        return Err(Error::Degenerate("source points are coincident".into()));
    }
    let theta = cross.atan2(dot);
    let scale = dot.hypot(cross) / src_sq;
    let (sin, cos) = theta.sin_cos();
    let tx = mu_d.0 - scale * (cos * mu_s.0 - sin * mu_s.1);
    let ty = mu_d.1 - scale * (sin * mu_s.0 + cos * mu_s.1);
    Ok(Similarity2D::new(
        scale as f32,
        theta as f32,
        Vec2::new(tx as f32, ty as f32),
    ))
}

/// Robust similarity fit by consensus: deterministic two-point hypothesis
/// sampling, inlier counting at a pixel tolerance, then a least-squares refit
/// on the winning inlier set. Coherently moving outlier clusters (a moving
/// subject occluding background tracks) cannot drag the estimate the way
/// reweighting schemes allow, because the scale/rotation dimensions never see
/// them.
pub fn estimate_global_similarity_robust(
    correspondences: &[(Vec2, Vec2)],
    inlier_tol_px: f32,
) -> Result<Similarity2D> {
    if correspondences.len() < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 correspondences, got {}",
            correspondences.len()
        )));
    }
    let n = correspondences.len();
    let uniform = vec![1.0f32; n];
    if n == 2 {
        return estimate_global_similarity(correspondences, &uniform);
    }

    let mut state = 0x9E3779B97F4A7C15u64;
    let mut next = move || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 33) as usize
    };
    let rounds = 96;
    let tol_sq = inlier_tol_px * inlier_tol_px;
    let mut best_score = f64::INFINITY;
    let mut best_inliers: Vec<usize> = Vec::new();
    for _ in 0..rounds {
        let i = next() % n;
        let j = next() % n;
        if i == j {
            continue;
        }
        let (si, di) = correspondences[i];
        let (sj, dj) = correspondences[j];
        if (si - sj).norm() < 2.0 {
            continue;
        }
        let pair = [(si, di), (sj, dj)];
        let Ok(candidate) = estimate_global_similarity(&pair, &[1.0, 1.0]) else {
            continue;
        };
        // Wild scales are never a plausible camera motion between frames.
        if !(0.5..=2.0).contains(&candidate.scale) {
            continue;
        }
        // Truncated quadratic score: every point pays at most the tolerance.
        let mut score = 0.0f64;
        let mut inliers = Vec::new();
        for (m, &(s, d)) in correspondences.iter().enumerate() {
            let r_sq = (d - candidate.apply(s)).norm_sq();
            if r_sq <= tol_sq {
                score += r_sq as f64;
                inliers.push(m);
            } else {
                score += tol_sq as f64;
            }
        }
        if score < best_score {
            best_score = score;
            best_inliers = inliers;
        }
    }
    if best_inliers.len() < 2 {
        return estimate_global_similarity(correspondences, &uniform);
    }
    // Refit on the winning set, then re-gate and refit once more.
    let mut fit = {
        let subset: Vec<(Vec2, Vec2)> = best_inliers
            .iter()
            .map(|&i| correspondences[i])
            .collect();
        estimate_global_similarity(&subset, &vec![1.0; subset.len()])?
    };
    for _ in 0..2 {
        let expanded: Vec<(Vec2, Vec2)> = correspondences
            .iter()
            .filter(|&&(s, d)| (d - fit.apply(s)).norm_sq() <= tol_sq)
            .copied()
            .collect();
        if expanded.len() >= 2 {
            fit = estimate_global_similarity(&expanded, &vec![1.0; expanded.len()])?;
        }
    }
    Ok(fit)
}

/// With rotation fixed, refit scale and translation by least squares.
pub fn refit_scale_translation(
    correspondences: &[(Vec2, Vec2)],
    weights: &[f32],
    theta: f32,
) -> Result<Similarity2D> {
    if correspondences.len() < 2 {
        return Err(Error::Degenerate("need at least 2 correspondences".into()));
    }
    let rot = Similarity2D::new(1.0, theta, Vec2::ZERO);
    let rotated: Vec<(Vec2, Vec2)> = correspondences
        .iter()
        .map(|&(s, d)| (rot.apply(s), d))
        .collect();
    let wsum: f64 = weights.iter().map(|&w| w as f64).sum();
    let mut mu_s = (0.0f64, 0.0f64);
    let mut mu_d = (0.0f64, 0.0f64);
    for ((s, d), &w) in rotated.iter().zip(weights) {
        let w = w as f64;
        mu_s.0 += w * s.x as f64;
        mu_s.1 += w * s.y as f64;
        mu_d.0 += w * d.x as f64;
        mu_d.1 += w * d.y as f64;
    }
    mu_s.0 /= wsum;
    mu_s.1 /= wsum;
    mu_d.0 /= wsum;
    mu_d.1 /= wsum;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for ((s, d), &w) in rotated.iter().zip(weights) {
        let w = w as f64;
        let sx = s.x as f64 - mu_s.0;
        let sy = s.y as f64 - mu_s.1;
        num += w * (sx * (d.x as f64 - mu_d.0) + sy * (d.y as f64 - mu_d.1));
        den += w * (sx * sx + sy * sy);
    }
    if den < 1e-12 {
        return Err(Error::Degenerate("source points are coincident".into()));
    }
    let scale = num / den;
    let tx = mu_d.0 - scale * mu_s.0;
    let ty = mu_d.1 - scale * mu_s.1;
    Ok(Similarity2D::new(
        scale as f32,
        theta,
        Vec2::new(tx as f32, ty as f32),
    ))
}

/// Per-frame alignment of a processed burst: similarity transforms into base
/// space plus optional per-frame mesh refinements (foreground blur).
#[derive(Debug, Clone)]
pub struct AlignmentSolution {
    /// `transforms[i]` maps processed-frame i coordinates (low res) into
    /// base-frame coordinates.
    pub transforms: Vec<Similarity2D>,
    pub meshes: Option<Vec<MeshWarp>>,
    pub width: usize,
    pub height: usize,
}

impl AlignmentSolution {
    pub fn identity(n_frames: usize, width: usize, height: usize) -> Self {
        AlignmentSolution {
            transforms: vec![Similarity2D::identity(); n_frames],
            meshes: None,
            width,
            height,
        }
    }

    /// Forward map of a low-res point of frame `i` into base space,
    /// including the mesh refinement when present.
    pub fn apply_forward(&self, frame: usize, p: Vec2) -> Vec2 {
        let q = self.transforms[frame].apply(p);
        match &self.meshes {
            Some(meshes) => q + meshes[frame].sample(q),
            None => q,
        }
    }

    /// Per-pixel sampling displacement for warping frame `i` into base
    /// space at a resolution `scale` times the low resolution: the source
    /// position is `p + d(p)`.
    pub fn displacement_field(&self, frame: usize, target_w: usize, target_h: usize, scale: f32) -> ImageBuf {
        let t_inv = self.transforms[frame].inverse();
        let mesh = self.meshes.as_ref().map(|m| &m[frame]);
        ImageBuf::from_fn(target_w, target_h, 2, |x, y, c| {
            let p_low = Vec2::new(x as f32 / scale, y as f32 / scale);
            let base = match mesh {
                Some(m) => p_low - m.sample(p_low),
                None => p_low,
            };
            let src = t_inv.apply(base);
            let d = (src - p_low) * scale;
            if c == 0 {
                d.x
            } else {
                d.y
            }
        })
    }
}

/// Direct-to-base global alignment for every processed frame: a robust fit
/// on all track correspondences, falling back to chaining through the
/// previous frame when too few tracks span back to base.
pub fn align_global(set: &TrackSet, min_direct: usize) -> Result<Vec<Similarity2D>> {
    let n = set.n_frames;
    let inlier_tol_px = 1.5;
    let mut transforms = vec![Similarity2D::identity(); n];
    for k in 1..n {
        let direct: Vec<(Vec2, Vec2)> = set
            .tracks
            .iter()
            .filter_map(|t| Some((t.position(k)?, t.position(0)?)))
            .collect();
        if direct.len() >= min_direct {
            transforms[k] = estimate_global_similarity_robust(&direct, inlier_tol_px)?;
        } else {
            let pairwise: Vec<(Vec2, Vec2)> = set
                .tracks
                .iter()
                .filter_map(|t| Some((t.position(k)?, t.position(k - 1)?)))
                .collect();
            if pairwise.len() < 2 {
                return Err(Error::Degenerate(format!(
                    "no correspondences for frame {k}"
                )));
            }
            let rel = estimate_global_similarity_robust(&pairwise, inlier_tol_px)?;
            transforms[k] = transforms[k - 1].compose(&rel);
        }
    }
    Ok(transforms)
}

/// Foreground-blur alignment: global transforms plus per-frame mesh warps
/// estimated from post-global residuals of tracks shared with the base
/// frame.
///
/// Residuals far beyond the bulk distribution come from tracked moving
/// objects, whose motion the warp must retain rather than cancel; they are
/// dropped before the mesh estimate. The threshold scales with the residual
/// distribution so multi-plane parallax (a large residual population) stays
/// in.
pub fn align_foreground(
    set: &TrackSet,
    mesh_params: &MeshParams,
) -> Result<AlignmentSolution> {
    let transforms = align_global(set, 8)?;
    let mut meshes = Vec::with_capacity(set.n_frames);
    for (k, transform) in transforms.iter().enumerate() {
        if k == 0 {
            meshes.push(MeshWarp::identity(
                set.width as f32,
                set.height as f32,
                mesh_params,
            ));
            continue;
        }
        let residuals: Vec<(Vec2, Vec2)> = set
            .tracks
            .iter()
            .filter_map(|t| {
                let pk = t.position(k)?;
                let p0 = t.position(0)?;
                let mapped = transform.apply(pk);
                Some((mapped, p0 - mapped))
            })
            .collect();
        let norms: Vec<f32> = residuals.iter().map(|(_, v)| v.norm()).collect();
        let threshold = (2.0 * crate::selection::percentile(&norms, 75.0))
            .max(mesh_params.mover_filter_floor_px);
        let filtered: Vec<(Vec2, Vec2)> = residuals
            .into_iter()
            .filter(|(_, v)| v.norm() <= threshold)
            .collect();
        meshes.push(refine_mesh_foreground(
            &filtered,
            set.width as f32,
            set.height as f32,
            mesh_params,
        ));
    }
    Ok(AlignmentSolution {
        transforms,
        meshes: Some(meshes),
        width: set.width,
        height: set.height,
    })
}

/// Background-blur alignment: global camera cancelation, spectral selection
/// of the salient subject cluster, then the regularized subject solver on
/// globally aligned track coordinates.
pub fn align_background(
    set: &TrackSet,
    solver_params: &SolverParams,
    cluster_params: &ClusterParams,
    seed: u64,
) -> Result<AlignmentSolution> {
    let global = align_global(set, 8)?;

    // Work on globally aligned track coordinates.
    let mut aligned = set.clone();
    for t in &mut aligned.tracks {
        for (i, p) in t.points.iter_mut().enumerate() {
            if let Some(v) = p {
                *v = global[i].apply(*v);
            }
        }
    }

    let subject = cluster_subject_tracks(&aligned, cluster_params, seed)?;
    let subject_lookup: std::collections::HashSet<usize> = subject.iter().copied().collect();
    let background: Vec<usize> = (0..aligned.tracks.len())
        .filter(|i| !subject_lookup.contains(i))
        .collect();

    let refine = solve_background_alignment(&aligned, &subject, &background, solver_params)?;
    let transforms: Vec<Similarity2D> = refine
        .iter()
        .zip(&global)
        .map(|(r, g)| r.compose(g))
        .collect();
    Ok(AlignmentSolution {
        transforms,
        meshes: None,
        width: set.width,
        height: set.height,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scatter(n: usize, seed: u64) -> Vec<Vec2> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec2::new(rng.gen_range(0.0..60.0), rng.gen_range(0.0..40.0)))
            .collect()
    }

    #[test]
    fn identity_correspondences_give_identity() {
        let pts = scatter(10, 1);
        let corr: Vec<(Vec2, Vec2)> = pts.iter().map(|&p| (p, p)).collect();
        let t = estimate_global_similarity(&corr, &vec![1.0; 10]).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-6);
        assert!(t.theta.abs() < 1e-6);
        assert!(t.t.norm() < 1e-4);
    }

    #[test]
    fn pure_translation_recovered() {
        let pts = scatter(10, 2);
        let shift = Vec2::new(5.0, -2.0);
        let corr: Vec<(Vec2, Vec2)> = pts.iter().map(|&p| (p, p + shift)).collect();
        let t = estimate_global_similarity(&corr, &vec![1.0; 10]).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-6);
        assert!(t.theta.abs() < 1e-6);
        assert!((t.t - shift).norm() < 1e-4);
    }

    #[test]
    fn rotation_about_centroid_recovered() {
        let pts = scatter(12, 3);
        let angle = 30.0f32.to_radians();
        let centroid = pts.iter().fold(Vec2::ZERO, |a, &p| a + p) / 12.0;
        let rot = Similarity2D::new(1.0, angle, Vec2::ZERO);
        let corr: Vec<(Vec2, Vec2)> = pts
            .iter()
            .map(|&p| (p, rot.apply(p - centroid) + centroid))
            .collect();
        let t = estimate_global_similarity(&corr, &vec![1.0; 12]).unwrap();
        assert!((t.theta - angle).abs() < 1e-6, "theta {}", t.theta);
        assert!((t.scale - 1.0).abs() < 1e-6);
    }

    #[test]
    fn coincident_points_are_degenerate() {
        let corr = vec![(Vec2::new(1.0, 1.0), Vec2::new(2.0, 2.0)); 5];
        assert!(matches!(
            estimate_global_similarity(&corr, &vec![1.0; 5]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn displacement_field_identity_is_zero() {
        let sol = AlignmentSolution::identity(2, 32, 24);
        let field = sol.displacement_field(1, 128, 96, 4.0);
        assert!(field.data().iter().all(|&v| v.abs() < 1e-5));
    }

    #[test]
    fn displacement_field_translation_is_constant() {
        let mut sol = AlignmentSolution::identity(2, 32, 24);
        // Frame content maps to base as x + (3, -1) at low res.
        sol.transforms[1] = Similarity2D::new(1.0, 0.0, Vec2::new(3.0, -1.0));
        let field = sol.displacement_field(1, 128, 96, 4.0);
        for y in 0..96 {
            for x in 0..128 {
                assert!((field.get(x, y, 0) + 12.0).abs() < 1e-3);
                assert!((field.get(x, y, 1) - 4.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn displacement_field_follows_mesh_bilinearly() {
        let params = MeshParams::default();
        let mut mesh = MeshWarp::identity(32.0, 24.0, &params);
        let stride = params.grid_cols + 1;
        mesh.displacement[2 * stride + 3] = Vec2::new(2.0, -1.0);
        let sol = AlignmentSolution {
            transforms: vec![Similarity2D::identity(); 2],
            meshes: Some(vec![MeshWarp::identity(32.0, 24.0, &params), mesh.clone()]),
            width: 32,
            height: 24,
        };
        let field = sol.displacement_field(1, 32, 24, 1.0);
        // With an identity global transform the sampling displacement is the
        // negated bilinear mesh displacement.
        for y in 0..24 {
            for x in 0..32 {
                let expected = -mesh.sample(Vec2::new(x as f32, y as f32));
                let got = Vec2::new(field.get(x, y, 0), field.get(x, y, 1));
                assert!((got - expected).norm() < 1e-5, "({x},{y}): {got:?} vs {expected:?}");
            }
        }
    }

    #[test]
    fn warped_frame_matches_base_under_translation() {
        use crate::synth::SynthScene;
        let scene = SynthScene::new(64, 48, 2, 21).with_camera_velocity(Vec2::new(2.0, 0.0));
        let f0 = scene.render_frame(0).to_gray();
        let f1 = scene.render_frame(1).to_gray();
        // Content of frame 1 sits 2px right of frame 0: frame1(x) = frame0(x-2),
        // so mapping frame-1 coords into base space is x - 2.
        let mut sol = AlignmentSolution::identity(2, 64, 48);
        sol.transforms[1] = Similarity2D::new(1.0, 0.0, Vec2::new(-2.0, 0.0));
        let field = sol.displacement_field(1, 64, 48, 1.0);
        let warped = f1.warp_by_field(&field);
        let mut max_err = 0.0f32;
        for y in 5..43 {
            for x in 5..59 {
                max_err = max_err.max((warped.get(x, y, 0) - f0.get(x, y, 0)).abs());
            }
        }
        assert!(max_err < 1e-3, "max_err {max_err}");
    }
}
