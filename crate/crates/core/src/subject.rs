//! Subject weight map construction from saliency and face signals.
//!
//! The map drives track-spawn density for background blur and face protection
//! during compositing. Saliency comes from an external map or a built-in
//! center prior; faces come from manifest regions feathered with a
//! smootherstep falloff.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::image_buf::ImageBuf;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SubjectParams {
    /// Saliency values below this are zeroed before renormalization.
    pub saliency_threshold: f32,
    /// Sigma of the fallback center-prior Gaussian, as a fraction of the
    /// image diagonal.
    pub center_prior_sigma_diag: f32,
}

impl Default for SubjectParams {
    fn default() -> Self {
        SubjectParams {
            saliency_threshold: 0.43,
            center_prior_sigma_diag: 0.25,
        }
    }
}

/// A feathered circular face region in low-resolution pixels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaceRegion {
    pub center: Vec2,
    pub inner_radius: f32,
    pub outer_radius: f32,
    /// Mean aligned feature movement inside the region in px/frame; filled by
    /// compositing once tracks and transforms exist.
    pub motion_mean: Option<f32>,
}

impl FaceRegion {
    pub fn new(center: Vec2, inner_radius: f32, outer_radius: f32) -> Self {
        assert!(inner_radius > 0.0 && inner_radius < outer_radius);
        FaceRegion {
            center,
            inner_radius,
            outer_radius,
            motion_mean: None,
        }
    }

    /// Rescale region coordinates by a resolution factor.
    pub fn scaled(&self, factor: f32) -> FaceRegion {
        FaceRegion {
            center: self.center * factor,
            inner_radius: self.inner_radius * factor,
            outer_radius: self.outer_radius * factor,
            motion_mean: self.motion_mean,
        }
    }

    /// Feathered membership: 1 inside the inner radius, smootherstep falloff
    /// to 0 at the outer radius.
    pub fn falloff(&self, p: Vec2) -> f32 {
        let r = (p - self.center).norm();
        if r <= self.inner_radius {
            1.0
        } else if r >= self.outer_radius {
            0.0
        } else {
            smootherstep((self.outer_radius - r) / (self.outer_radius - self.inner_radius))
        }
    }
}

/// C2-continuous step: 6t^5 - 15t^4 + 10t^3 on [0,1], clamped outside.
pub fn smootherstep(t: f32) -> f32 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// The combined subject weight map and its ingredients.
#[derive(Debug, Clone)]
pub struct SubjectWeightMap {
    pub saliency: ImageBuf,
    pub face: ImageBuf,
    pub weight: ImageBuf,
}

/// Normalize an external saliency map (or synthesize a center prior), zero
/// out values below the threshold and renormalize to [0,1].
pub fn load_or_synthesize_saliency(
    width: usize,
    height: usize,
    external: Option<&ImageBuf>,
    params: &SubjectParams,
) -> Result<ImageBuf> {
    let raw = match external {
        Some(map) => {
            if map.width() != width || map.height() != height {
                return Err(Error::DimensionMismatch {
                    expected_w: width,
                    expected_h: height,
                    got_w: map.width(),
                    got_h: map.height(),
                });
            }
            map.map(|v| v.clamp(0.0, 1.0))
        }
        None => center_prior(width, height, params.center_prior_sigma_diag),
    };
    let thresholded = raw.map(|v| if v < params.saliency_threshold { 0.0 } else { v });
    Ok(normalize_max(&thresholded))
}

fn center_prior(width: usize, height: usize, sigma_diag: f32) -> ImageBuf {
    let cx = (width - 1) as f32 / 2.0;
    let cy = (height - 1) as f32 / 2.0;
    let sigma = sigma_diag * ((width * width + height * height) as f32).sqrt();
    let inv = 1.0 / (2.0 * sigma * sigma);
    ImageBuf::from_fn(width, height, 1, |x, y, _| {
        let dx = x as f32 - cx;
        let dy = y as f32 - cy;
        (-(dx * dx + dy * dy) * inv).exp()
    })
}

fn normalize_max(map: &ImageBuf) -> ImageBuf {
    let max = map.max_value();
    if max > 0.0 {
        map.map(|v| v / max)
    } else {
        map.clone()
    }
}

/// Per-pixel max over feathered face regions and an optional external face
/// map, optionally masked by a whole-subject segmentation map.
pub fn face_signal(
    regions: &[FaceRegion],
    width: usize,
    height: usize,
    external: Option<&ImageBuf>,
    segmentation: Option<&ImageBuf>,
) -> ImageBuf {
    let mut f = ImageBuf::from_fn(width, height, 1, |x, y, _| {
        let p = Vec2::new(x as f32, y as f32);
        let from_regions = regions
            .iter()
            .map(|r| r.falloff(p))
            .fold(0.0f32, f32::max);
        match external {
            Some(map) => from_regions.max(map.get(x, y, 0).clamp(0.0, 1.0)),
            None => from_regions,
        }
    });
    if let Some(seg) = segmentation {
        assert!(seg.width() == width && seg.height() == height);
        for y in 0..height {
            for x in 0..width {
                let v = f.get(x, y, 0) * seg.get(x, y, 0).clamp(0.0, 1.0);
                f.set(x, y, 0, v);
            }
        }
    }
    f
}

/// w = s * (1 + f), rescaled so the max is 1 (an all-zero map stays zero).
pub fn combine_subject_weights(saliency: &ImageBuf, face: &ImageBuf) -> ImageBuf {
    assert!(saliency.dims_match(face));
    let raw = ImageBuf::from_fn(saliency.width(), saliency.height(), 1, |x, y, _| {
        saliency.get(x, y, 0) * (1.0 + face.get(x, y, 0))
    });
    normalize_max(&raw)
}

/// Full subject map construction for one low-resolution frame.
pub fn build_subject_map(
    width: usize,
    height: usize,
    external_saliency: Option<&ImageBuf>,
    regions: &[FaceRegion],
    external_face: Option<&ImageBuf>,
    segmentation: Option<&ImageBuf>,
    params: &SubjectParams,
) -> Result<SubjectWeightMap> {
    if let Some(map) = external_face {
        map.expect_dims(width, height)?;
    }
    if let Some(map) = segmentation {
        map.expect_dims(width, height)?;
    }
    let saliency = load_or_synthesize_saliency(width, height, external_saliency, params)?;
    let face = face_signal(regions, width, height, external_face, segmentation);
    let weight = combine_subject_weights(&saliency, &face);
    Ok(SubjectWeightMap {
        saliency,
        face,
        weight,
    })
}
