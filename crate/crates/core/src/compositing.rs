//! Compositing: blend the half-resolution blurred result with the sharp base
//! frame, protecting stationary regions and low-motion faces.

use serde::{Deserialize, Serialize};

use crate::geom::Similarity2D;
use crate::image_buf::ImageBuf;
use crate::selection::percentile;
use crate::subject::FaceRegion;
use crate::tracking::TrackSet;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CompositeParams {
    /// Motion below alpha * |F|_ref maps to fully sharp.
    pub alpha: f32,
    /// Motion above beta * |F|_ref maps to fully blurred.
    pub beta: f32,
    /// Robust-max percentile for |F|_ref.
    pub flow_ref_percentile: f32,
    /// Guided filter window radius (at the mask's resolution).
    pub guided_radius: usize,
    pub guided_epsilon: f32,
    /// Faces whose mean aligned track movement across the burst is below
    /// this fraction of the diagonal stay sharp.
    pub face_motion_max_diag_fraction: f32,
    /// Flow estimates this close to the border (in flow-field pixels) are
    /// warp-smeared and untrustworthy; the mask keeps those pixels sharp.
    pub border_protect_px: usize,
}

impl Default for CompositeParams {
    fn default() -> Self {
        CompositeParams {
            alpha: 0.16,
            beta: 0.32,
            flow_ref_percentile: 99.0,
            guided_radius: 8,
            guided_epsilon: 1e-3,
            face_motion_max_diag_fraction: 0.01,
            border_protect_px: 4,
        }
    }
}

/// Per-pixel maximum motion magnitude across all frame pairs, rescaled
/// against the robust max: 0 below alpha*ref, 1 above beta*ref. An all-zero
/// field yields a fully protected (all-sharp) mask.
pub fn compute_flow_mask(flow_fields: &[&ImageBuf], params: &CompositeParams) -> ImageBuf {
    assert!(!flow_fields.is_empty());
    let (w, h) = (flow_fields[0].width(), flow_fields[0].height());
    let mut magnitude = ImageBuf::new(w, h, 1);
    for field in flow_fields {
        assert_eq!(field.channels(), 2);
        assert!(field.dims_match(flow_fields[0]));
        for y in 0..h {
            for x in 0..w {
                let m = field.sample_vec2(x as f32, y as f32).norm();
                if m > magnitude.get(x, y, 0) {
                    magnitude.set(x, y, 0, m);
                }
            }
        }
    }
    let border = params.border_protect_px;
    for y in 0..h {
        for x in 0..w {
            if x < border || y < border || x + border >= w || y + border >= h {
                magnitude.set(x, y, 0, 0.0);
            }
        }
    }
    let reference = percentile(magnitude.data(), params.flow_ref_percentile);
    let lo = params.alpha * reference;
    let hi = params.beta * reference;
    if hi - lo <= 0.0 {
        return ImageBuf::new(w, h, 1);
    }
    magnitude.map(|m| ((m - lo) / (hi - lo)).clamp(0.0, 1.0))
}

fn box_filter(img: &ImageBuf, radius: usize) -> ImageBuf {
    let (w, h) = (img.width(), img.height());
    let r = radius as isize;
    // Summed-area table with a one-pixel zero border.
    let mut sat = vec![0.0f64; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + (x + 1)] = img.get(x, y, 0) as f64
                + sat[y * (w + 1) + (x + 1)]
                + sat[(y + 1) * (w + 1) + x]
                - sat[y * (w + 1) + x];
        }
    }
    ImageBuf::from_fn(w, h, 1, |x, y, _| {
        let x0 = (x as isize - r).max(0) as usize;
        let y0 = (y as isize - r).max(0) as usize;
        let x1 = (x as isize + r + 1).min(w as isize) as usize;
        let y1 = (y as isize + r + 1).min(h as isize) as usize;
        let sum = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
            + sat[y0 * (w + 1) + x0];
        (sum / ((x1 - x0) * (y1 - y0)) as f64) as f32
    })
}

/// Guided filter: edge-aware smoothing of the mask so its edges follow the
/// sharp guide image instead of the flow field.
pub fn refine_mask_edge_aware(mask: &ImageBuf, guide: &ImageBuf, params: &CompositeParams) -> ImageBuf {
    assert!(mask.dims_match(guide));
    let guide = guide.to_gray();
    let r = params.guided_radius;
    let eps = params.guided_epsilon;
    let mean_i = box_filter(&guide, r);
    let mean_p = box_filter(mask, r);
    let (w, h) = (mask.width(), mask.height());
    let ip = ImageBuf::from_fn(w, h, 1, |x, y, _| guide.get(x, y, 0) * mask.get(x, y, 0));
    let ii = ImageBuf::from_fn(w, h, 1, |x, y, _| guide.get(x, y, 0) * guide.get(x, y, 0));
    let corr_ip = box_filter(&ip, r);
    let corr_ii = box_filter(&ii, r);
    let mut a = ImageBuf::new(w, h, 1);
    let mut b = ImageBuf::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let cov = corr_ip.get(x, y, 0) - mean_i.get(x, y, 0) * mean_p.get(x, y, 0);
            let var = corr_ii.get(x, y, 0) - mean_i.get(x, y, 0) * mean_i.get(x, y, 0);
            let ak = cov / (var + eps);
            a.set(x, y, 0, ak);
            b.set(x, y, 0, mean_p.get(x, y, 0) - ak * mean_i.get(x, y, 0));
        }
    }
    let mean_a = box_filter(&a, r);
    let mean_b = box_filter(&b, r);
    ImageBuf::from_fn(w, h, 1, |x, y, _| {
        (mean_a.get(x, y, 0) * guide.get(x, y, 0) + mean_b.get(x, y, 0)).clamp(0.0, 1.0)
    })
}

/// Mean aligned per-frame movement of the tracks inside each region, written
/// into `motion_mean` (px/frame in the region's resolution via `track_scale`).
pub fn fill_face_motion(
    regions: &mut [FaceRegion],
    set: &TrackSet,
    transforms: &[Similarity2D],
    track_scale: f32,
) {
    for region in regions.iter_mut() {
        let mut step_sum = 0.0f32;
        let mut steps = 0usize;
        for track in &set.tracks {
            let Some(p0) = track.points.iter().flatten().next() else {
                continue;
            };
            if (*p0 * track_scale - region.center).norm() > region.outer_radius {
                continue;
            }
            for k in 1..transforms.len().min(track.points.len()) {
                let (Some(a), Some(b)) = (track.position(k - 1), track.position(k)) else {
                    continue;
                };
                step_sum +=
                    (transforms[k].apply(b) - transforms[k - 1].apply(a)).norm() * track_scale;
                steps += 1;
            }
        }
        region.motion_mean = if steps > 0 {
            Some(step_sum / steps as f32)
        } else {
            Some(0.0)
        };
    }
}

/// Feathered mask of faces whose accumulated aligned motion stays below the
/// threshold: 1 where a face must stay sharp.
pub fn face_protection_mask(
    regions: &[FaceRegion],
    width: usize,
    height: usize,
    n_frames: usize,
    params: &CompositeParams,
) -> ImageBuf {
    let diag = ((width * width + height * height) as f32).sqrt();
    let max_total = params.face_motion_max_diag_fraction * diag;
    let steps = n_frames.saturating_sub(1).max(1) as f32;
    let protected: Vec<&FaceRegion> = regions
        .iter()
        .filter(|r| r.motion_mean.unwrap_or(0.0) * steps < max_total)
        .collect();
    ImageBuf::from_fn(width, height, 1, |x, y, _| {
        let p = crate::geom::Vec2::new(x as f32, y as f32);
        protected
            .iter()
            .map(|r| r.falloff(p))
            .fold(0.0f32, f32::max)
    })
}

/// Combine the flow mask with face protection: faces clamp the mask toward
/// sharp (the max-combine in sharpness space).
pub fn combine_masks(flow_mask: &ImageBuf, face_protect: &ImageBuf) -> ImageBuf {
    assert!(flow_mask.dims_match(face_protect));
    ImageBuf::from_fn(flow_mask.width(), flow_mask.height(), 1, |x, y, _| {
        (flow_mask.get(x, y, 0) * (1.0 - face_protect.get(x, y, 0))).clamp(0.0, 1.0)
    })
}

/// Final blend at full resolution: `out = M * blurred + (1 - M) * sharp`,
/// with the blurred image and the mask bilinearly upsampled.
pub fn composite_final(sharp: &ImageBuf, blurred_half: &ImageBuf, mask: &ImageBuf) -> ImageBuf {
    let (w, h) = (sharp.width(), sharp.height());
    let blurred = blurred_half.upsample_bilinear(w, h);
    let mask = mask.upsample_bilinear(w, h);
    ImageBuf::from_fn(w, h, sharp.channels(), |x, y, c| {
        let m = mask.get(x, y, 0);
        m * blurred.get(x, y, c.min(blurred.channels() - 1)) + (1.0 - m) * sharp.get(x, y, c)
    })
}
