//! Spectral clustering of subject-weighted tracks by motion coherence.
//!
//! Tracks are embedded by mean velocity, affinity is a Gaussian kernel on
//! velocity distance with a median-distance bandwidth, the cluster count is
//! picked by the eigengap of the normalized Laplacian, and the cluster with
//! the highest total subject weight wins.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::tracking::TrackSet;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClusterParams {
    pub max_clusters: usize,
    pub kmeans_iterations: usize,
    /// Floor on the local bandwidth, in px/frame: velocity differences below
    /// tracking noise never separate clusters.
    pub min_bandwidth: f32,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            max_clusters: 4,
            kmeans_iterations: 50,
            min_bandwidth: 0.5,
        }
    }
}

/// Select the most salient motion cluster among subject-weighted tracks.
/// Returns indices into `set.tracks`. Errors with [`Error::NoSubjectTracks`]
/// when no track has positive weight, signaling the sharp-only fallback.
pub fn cluster_subject_tracks(
    set: &TrackSet,
    params: &ClusterParams,
    seed: u64,
) -> Result<Vec<usize>> {
    let candidates: Vec<usize> = set
        .tracks
        .iter()
        .enumerate()
        .filter(|(_, t)| t.weight > 0.0 && t.valid_len() >= 2)
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(Error::NoSubjectTracks);
    }
    if candidates.len() < 4 {
        return Ok(candidates);
    }

    let velocities: Vec<Vec2> = candidates
        .iter()
        .map(|&i| set.tracks[i].mean_velocity())
        .collect();
    let n = velocities.len();

    // Locally scaled Gaussian affinity: sigma_i is the distance to the 7th
    // nearest neighbor, which keeps tight clusters connected while isolating
    // outliers regardless of the global distance distribution.
    let neighbor_rank = 7.min(n - 1);
    let sigmas: Vec<f64> = (0..n)
        .map(|i| {
            let mut d: Vec<f32> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (velocities[i] - velocities[j]).norm())
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            d[neighbor_rank - 1].max(params.min_bandwidth) as f64
        })
        .collect();

    let mut affinity = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d = (velocities[i] - velocities[j]).norm() as f64;
                affinity[(i, j)] = (-(d * d) / (sigmas[i] * sigmas[j])).exp();
            }
        }
    }

    // Normalized Laplacian L = I - D^-1/2 A D^-1/2. Isolated vertices are
    // their own components: their diagonal is zeroed so they contribute a
    // zero eigenvalue like any other connected component.
    let degrees: Vec<f64> = (0..n).map(|i| affinity.row(i).sum()).collect();
    let mut lap = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        if degrees[i] < 1e-9 {
            lap[(i, i)] = 0.0;
            continue;
        }
        for j in 0..n {
            if i != j && degrees[j] >= 1e-9 {
                lap[(i, j)] = -affinity[(i, j)] / (degrees[i] * degrees[j]).sqrt();
            }
        }
    }

    let eig = lap.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let sorted: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();

    // Eigengap heuristic over k = 1..=max_clusters.
    let kmax = params.max_clusters.min(n - 1);
    let mut best_k = 1;
    let mut best_gap = f64::NEG_INFINITY;
    for k in 1..=kmax {
        let gap = sorted[k] - sorted[k - 1];
        if gap > best_gap {
            best_gap = gap;
            best_k = k;
        }
    }
    if best_k <= 1 {
        return Ok(candidates);
    }

    // Row-normalized spectral embedding on the first k eigenvectors.
    let mut embedding = vec![vec![0.0f64; best_k]; n];
    for (col, &src) in order[..best_k].iter().enumerate() {
        let v: DVector<f64> = eig.eigenvectors.column(src).into();
        for i in 0..n {
            embedding[i][col] = v[i];
        }
    }
    for row in &mut embedding {
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }

    let assignment = kmeans(&embedding, best_k, params.kmeans_iterations, seed);

    // Highest total subject weight wins.
    let mut cluster_weight = vec![0.0f32; best_k];
    for (i, &c) in assignment.iter().enumerate() {
        cluster_weight[c] += set.tracks[candidates[i]].weight;
    }
    let best_cluster = cluster_weight
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    Ok(candidates
        .iter()
        .enumerate()
        .filter(|(i, _)| assignment[*i] == best_cluster)
        .map(|(_, &t)| t)
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Deterministic k-means with k-means++ seeding.
fn kmeans(points: &[Vec<f64>], k: usize, iterations: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..n)].clone());
    while centers.len() < k {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            centers.push(points[rng.gen_range(0..n)].clone());
            continue;
        }
        let mut target = rng.gen::<f64>() * total;
        let mut chosen = n - 1;
        for (i, w) in weights.iter().enumerate() {
            target -= w;
            if target <= 0.0 {
                chosen = i;
                break;
            }
        }
        centers.push(points[chosen].clone());
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..iterations {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| {
                    sq_dist(p, &centers[a])
                        .partial_cmp(&sq_dist(p, &centers[b]))
                        .unwrap()
                })
                .unwrap();
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assignment[i]] += 1;
            for d in 0..dim {
                sums[assignment[i]][d] += p[d];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dim {
                    centers[c][d] = sums[c][d] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    assignment
}
