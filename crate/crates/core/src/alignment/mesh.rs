//! Spatially varying mesh refinement for foreground blur.
//!
//! After the global transform, per-vertex local similarity transforms are
//! estimated from the residual correspondences inside each vertex's support
//! radius (uniform weights, hard cutoff) and applied to the vertex to form a
//! displacement grid. The grid is bilinearly interpolated and folded into the
//! downstream warp as a displacement texture.

use serde::{Deserialize, Serialize};

use super::estimate_global_similarity;
use crate::geom::Vec2;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MeshParams {
    pub grid_cols: usize,
    pub grid_rows: usize,
    /// Support radius as a multiple of the cell size.
    pub support_radius_factor: f32,
    /// Vertices with fewer in-radius points inherit the nearest estimated
    /// neighbor's transform.
    pub min_points: usize,
    /// Minimum rms spread of the in-radius points; tighter clusters cannot
    /// condition a similarity fit and inherit instead.
    pub min_point_spread_px: f32,
    /// Smoothness bound: a vertex displacement may differ from the mean of
    /// its neighbors by at most this multiple of the cell size.
    pub max_neighbor_delta_cells: f32,
    /// Floor of the mover-rejection threshold applied to mesh input
    /// residuals (px at low resolution).
    pub mover_filter_floor_px: f32,
}

impl Default for MeshParams {
    fn default() -> Self {
        MeshParams {
            grid_cols: 8,
            grid_rows: 6,
            support_radius_factor: 1.5,
            min_points: 4,
            min_point_spread_px: 1.0,
            max_neighbor_delta_cells: 1.0,
            mover_filter_floor_px: 3.0,
        }
    }
}

impl MeshParams {
    /// Cell size in pixels for a given image: the mean of the cell extents.
    pub fn cell_size(&self, width: f32, height: f32) -> f32 {
        0.5 * (width / self.grid_cols as f32 + height / self.grid_rows as f32)
    }

    pub fn support_radius(&self, width: f32, height: f32) -> f32 {
        self.support_radius_factor * self.cell_size(width, height)
    }
}

/// Displacement vectors on a (rows+1) x (cols+1) vertex grid over the
/// low-resolution image, bilinearly interpolated between vertices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeshWarp {
    pub cols: usize,
    pub rows: usize,
    pub width: f32,
    pub height: f32,
    /// Row-major (rows+1) x (cols+1) vertex displacements.
    pub displacement: Vec<Vec2>,
}

impl MeshWarp {
    pub fn identity(width: f32, height: f32, params: &MeshParams) -> Self {
        MeshWarp {
            cols: params.grid_cols,
            rows: params.grid_rows,
            width,
            height,
            displacement: vec![Vec2::ZERO; (params.grid_cols + 1) * (params.grid_rows + 1)],
        }
    }

    pub fn vertex_position(&self, col: usize, row: usize) -> Vec2 {
        Vec2::new(
            self.width * col as f32 / self.cols as f32,
            self.height * row as f32 / self.rows as f32,
        )
    }

    pub fn is_identity(&self, eps: f32) -> bool {
        self.displacement.iter().all(|d| d.norm() <= eps)
    }

    pub fn max_displacement(&self) -> f32 {
        self.displacement.iter().map(|d| d.norm()).fold(0.0, f32::max)
    }

    /// Bilinear displacement at a low-res position, clamped to the grid.
    pub fn sample(&self, p: Vec2) -> Vec2 {
        let gx = (p.x / self.width * self.cols as f32).clamp(0.0, self.cols as f32);
        let gy = (p.y / self.height * self.rows as f32).clamp(0.0, self.rows as f32);
        let c0 = (gx.floor() as usize).min(self.cols - 1);
        let r0 = (gy.floor() as usize).min(self.rows - 1);
        let fx = gx - c0 as f32;
        let fy = gy - r0 as f32;
        let stride = self.cols + 1;
        let d00 = self.displacement[r0 * stride + c0];
        let d10 = self.displacement[r0 * stride + c0 + 1];
        let d01 = self.displacement[(r0 + 1) * stride + c0];
        let d11 = self.displacement[(r0 + 1) * stride + c0 + 1];
        let top = d00 + (d10 - d00) * fx;
        let bot = d01 + (d11 - d01) * fx;
        top + (bot - top) * fy
    }
}

/// Estimate the refinement mesh from residual correspondences in base-frame
/// space. Each residual is `(position, vector)` where `position + vector` is
/// where the point should land.
pub fn refine_mesh_foreground(
    residuals: &[(Vec2, Vec2)],
    width: f32,
    height: f32,
    params: &MeshParams,
) -> MeshWarp {
    let mut mesh = MeshWarp::identity(width, height, params);
    if residuals.is_empty() {
        return mesh;
    }
    let radius = params.support_radius(width, height);
    let stride = params.grid_cols + 1;
    let n_vertices = stride * (params.grid_rows + 1);

    // Local similarity per vertex where enough points fall in the support
    // radius; estimated transforms are kept for inheritance.
    let mut local: Vec<Option<crate::geom::Similarity2D>> = vec![None; n_vertices];
    for row in 0..=params.grid_rows {
        for col in 0..=params.grid_cols {
            let v = mesh.vertex_position(col, row);
            let in_radius: Vec<(Vec2, Vec2)> = residuals
                .iter()
                .filter(|(p, _)| (*p - v).norm() <= radius)
                .map(|&(p, vec)| (p, p + vec))
                .collect();
            if in_radius.len() >= params.min_points
                && point_spread(&in_radius) >= params.min_point_spread_px
            {
                let w = vec![1.0; in_radius.len()];
                if let Ok(t) = estimate_global_similarity(&in_radius, &w) {
                    local[row * stride + col] = Some(t);
                }
            }
        }
    }

    // Vertices without an estimate inherit the nearest estimated vertex.
    let estimated: Vec<(usize, Vec2)> = (0..n_vertices)
        .filter(|&i| local[i].is_some())
        .map(|i| {
            let col = i % stride;
            let row = i / stride;
            (i, mesh.vertex_position(col, row))
        })
        .collect();
    if estimated.is_empty() {
        return mesh;
    }
    for row in 0..=params.grid_rows {
        for col in 0..=params.grid_cols {
            let idx = row * stride + col;
            let v = mesh.vertex_position(col, row);
            let t = match local[idx] {
                Some(t) => t,
                None => {
                    let (src, _) = estimated
                        .iter()
                        .min_by(|(_, a), (_, b)| {
                            (*a - v).norm().partial_cmp(&(*b - v).norm()).unwrap()
                        })
                        .copied()
                        .unwrap();
                    local[src].unwrap()
                }
            };
            mesh.displacement[idx] = t.apply(v) - v;
        }
    }
    smooth_clamp(&mut mesh, params);
    mesh
}

fn point_spread(points: &[(Vec2, Vec2)]) -> f32 {
    let centroid = points.iter().fold(Vec2::ZERO, |a, (p, _)| a + *p) / points.len() as f32;
    (points
        .iter()
        .map(|(p, _)| (*p - centroid).norm_sq())
        .sum::<f32>()
        / points.len() as f32)
        .sqrt()
}

/// Enforce the smoothness invariant: each vertex may deviate from the mean
/// of its grid neighbors by at most the configured bound.
fn smooth_clamp(mesh: &mut MeshWarp, params: &MeshParams) {
    let bound =
        params.max_neighbor_delta_cells * params.cell_size(mesh.width, mesh.height);
    let stride = mesh.cols + 1;
    for _ in 0..3 {
        let snapshot = mesh.displacement.clone();
        for row in 0..=mesh.rows {
            for col in 0..=mesh.cols {
                let mut sum = Vec2::ZERO;
                let mut count = 0;
                for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                    let (nr, nc) = (row as isize + dr, col as isize + dc);
                    if nr < 0 || nc < 0 || nr > mesh.rows as isize || nc > mesh.cols as isize {
                        continue;
                    }
                    sum += snapshot[nr as usize * stride + nc as usize];
                    count += 1;
                }
                let mean = sum / count as f32;
                let idx = row * stride + col;
                let delta = snapshot[idx] - mean;
                mesh.displacement[idx] = mean + delta.clamp_norm(bound);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scatter(n: usize, w: f32, h: f32, seed: u64) -> Vec<Vec2> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec2::new(rng.gen_range(0.0..w), rng.gen_range(0.0..h)))
            .collect()
    }

    #[test]
    fn zero_residuals_give_identity_mesh() {
        let pts = scatter(60, 64.0, 48.0, 1);
        let residuals: Vec<(Vec2, Vec2)> = pts.iter().map(|&p| (p, Vec2::ZERO)).collect();
        let mesh = refine_mesh_foreground(&residuals, 64.0, 48.0, &MeshParams::default());
        assert!(mesh.is_identity(1e-3), "max {}", mesh.max_displacement());
    }

    #[test]
    fn empty_residuals_give_identity_mesh() {
        let mesh = refine_mesh_foreground(&[], 64.0, 48.0, &MeshParams::default());
        assert!(mesh.is_identity(0.0));
    }

    #[test]
    fn uniform_residual_displaces_all_vertices() {
        let pts = scatter(80, 64.0, 48.0, 2);
        let shift = Vec2::new(2.0, 0.0);
        let residuals: Vec<(Vec2, Vec2)> = pts.iter().map(|&p| (p, shift)).collect();
        let mesh = refine_mesh_foreground(&residuals, 64.0, 48.0, &MeshParams::default());
        for d in &mesh.displacement {
            assert!((*d - shift).norm() < 1e-3, "vertex displacement {:?}", d);
        }
    }

    #[test]
    fn support_radius_is_one_point_five_cells() {
        let params = MeshParams::default();
        let cell = params.cell_size(64.0, 48.0);
        assert!((params.support_radius(64.0, 48.0) / cell - 1.5).abs() < 1e-6);
    }

    #[test]
    fn single_displaced_vertex_interpolates_bilinearly() {
        let params = MeshParams::default();
        let mut mesh = MeshWarp::identity(64.0, 48.0, &params);
        let stride = params.grid_cols + 1;
        // Displace vertex (col 2, row 2).
        mesh.displacement[2 * stride + 2] = Vec2::new(4.0, 0.0);
        let v = mesh.vertex_position(2, 2);
        assert!((mesh.sample(v) - Vec2::new(4.0, 0.0)).norm() < 1e-5);
        // Halfway to the next vertex along x the displacement halves.
        let half = Vec2::new(v.x + 64.0 / 16.0, v.y);
        assert!((mesh.sample(half) - Vec2::new(2.0, 0.0)).norm() < 1e-5);
        // Unrelated area stays put.
        assert!(mesh.sample(Vec2::new(60.0, 4.0)).norm() < 1e-6);
    }

    #[test]
    fn sparse_vertices_inherit_nearest_estimate() {
        // All residuals concentrated on the left half; right-half vertices
        // must inherit rather than stay identity.
        let pts = scatter(40, 30.0, 48.0, 3);
        let shift = Vec2::new(0.0, 1.5);
        let residuals: Vec<(Vec2, Vec2)> = pts.iter().map(|&p| (p, shift)).collect();
        let mesh = refine_mesh_foreground(&residuals, 64.0, 48.0, &MeshParams::default());
        for d in &mesh.displacement {
            assert!((*d - shift).norm() < 1e-3);
        }
    }
}
