//! Frame selection: pre-capture planning from viewfinder motion statistics
//! and the incremental stop criterion from aligned blur-trail lengths.

use serde::{Deserialize, Serialize};

use crate::alignment::align_global;
use crate::error::{Error, Result};
use crate::geom::Similarity2D;
use crate::image_buf::ImageBuf;
use crate::tracking::{track_burst, track_length_diag_pct, TrackSet, TrackingParams};

/// Number of past frames background blur may consume in addition to the base.
pub const MAX_PAST_FRAMES_BACKGROUND: usize = 8;
/// Upper bound on frames processed in foreground mode.
pub const MAX_PROCESSED_FRAMES: usize = 12;
/// Capture never extends past this duration.
pub const MAX_CAPTURE_DURATION_S: f32 = 7.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SelectionPolicy {
    /// Percentile of the track length distribution used as the blur-trail
    /// length estimate.
    pub percentile: f32,
    /// Stop once the estimate reaches this percentage of the image diagonal.
    pub target_pct_diag: f32,
    /// Hard cap on processed frames (base frame included).
    pub max_frames: usize,
}

impl SelectionPolicy {
    pub fn foreground() -> Self {
        SelectionPolicy {
            percentile: 98.0,
            target_pct_diag: 30.0,
            max_frames: MAX_PROCESSED_FRAMES,
        }
    }

    pub fn background() -> Self {
        SelectionPolicy {
            percentile: 80.0,
            target_pct_diag: 2.8,
            max_frames: MAX_PAST_FRAMES_BACKGROUND + 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapturePlan {
    pub duration_s: f32,
    pub stride: usize,
    /// Capture-relative frame indices selected for processing.
    pub selected_indices: Vec<usize>,
}

/// Linear-interpolation percentile of unsorted values, p in [0, 100].
pub fn percentile(values: &[f32], p: f32) -> f32 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = (p.clamp(0.0, 100.0) / 100.0) * (sorted.len() - 1) as f32;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f32;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Aligned track lengths (percent of diagonal) over the first `n_frames`
/// processed frames, for tracks still live at the newest frame. Dead tracks
/// stop growing and their respawned replacements would otherwise dilute the
/// percentile as the burst extends.
pub fn aligned_track_lengths(
    set: &TrackSet,
    transforms: &[Similarity2D],
    n_frames: usize,
) -> Vec<f32> {
    let n = n_frames.min(transforms.len()).min(set.n_frames);
    let diag = set.diagonal();
    set.tracks
        .iter()
        .filter(|t| t.is_live_at(n - 1))
        .map(|t| {
            let mut clipped = t.clone();
            clipped.points.truncate(n);
            track_length_diag_pct(&clipped, &transforms[..n], diag)
        })
        .collect()
}

/// Stop criterion: true once the percentile of aligned track lengths reaches
/// the target, or the frame cap is hit. Also returns the current estimate.
pub fn selection_satisfied(
    set: &TrackSet,
    transforms: &[Similarity2D],
    n_frames: usize,
    policy: &SelectionPolicy,
) -> (bool, f32) {
    let lengths = aligned_track_lengths(set, transforms, n_frames);
    let estimate = percentile(&lengths, policy.percentile);
    let satisfied = estimate >= policy.target_pct_diag || n_frames >= policy.max_frames;
    (satisfied, estimate)
}

/// Walk forward through the processed burst and return how many frames the
/// stop criterion selects, with the final trail-length estimate.
pub fn select_frame_count(
    set: &TrackSet,
    transforms: &[Similarity2D],
    policy: &SelectionPolicy,
) -> (usize, f32) {
    let available = set.n_frames.min(transforms.len());
    let mut estimate = 0.0;
    for n in 2..=available {
        let (ok, est) = selection_satisfied(set, transforms, n, policy);
        estimate = est;
        if ok {
            return (n, estimate);
        }
    }
    (available, estimate)
}

/// Scene velocity from the last viewfinder frames: a lightweight track +
/// global align pass, returning the policy percentile of per-frame aligned
/// step lengths as percent of diagonal.
pub fn estimate_scene_velocity(
    grays_low: &[ImageBuf],
    policy: &SelectionPolicy,
    params: &TrackingParams,
    seed: u64,
) -> Result<f32> {
    if grays_low.len() < 5 {
        return Err(Error::Manifest(format!(
            "velocity estimation needs 5 viewfinder frames, got {}",
            grays_low.len()
        )));
    }
    let window = &grays_low[grays_low.len() - 5..];
    let uniform = ImageBuf::constant(window[0].width(), window[0].height(), 1, 1.0);
    let set = track_burst(window, &uniform, params, seed);
    let transforms = align_global(&set, 8)?;
    let diag = set.diagonal();
    let mut steps = Vec::new();
    for t in &set.tracks {
        for k in 1..set.n_frames {
            let (Some(a), Some(b)) = (t.position(k - 1), t.position(k)) else {
                continue;
            };
            let step = (transforms[k].apply(b) - transforms[k - 1].apply(a)).norm();
            steps.push(100.0 * step / diag);
        }
    }
    Ok(percentile(&steps, policy.percentile))
}

/// Derive the capture schedule from the velocity estimate under a constant
/// velocity assumption: enough frames for the target trail length, capped at
/// the maximum duration, thinned to an evenly spaced subset.
pub fn plan_capture(
    velocity_pct_per_frame: f32,
    policy: &SelectionPolicy,
    frame_rate_hz: f32,
) -> CapturePlan {
    let cap_frames = (MAX_CAPTURE_DURATION_S * frame_rate_hz).round() as usize;
    let travel_frames = if velocity_pct_per_frame > 0.0 {
        ((policy.target_pct_diag / velocity_pct_per_frame).ceil() as usize).min(cap_frames)
    } else {
        cap_frames
    };
    let stride = travel_frames.div_ceil(MAX_PROCESSED_FRAMES - 1).max(1);
    let selected_indices: Vec<usize> = (0..=travel_frames).step_by(stride).collect();
    CapturePlan {
        duration_s: travel_frames as f32 / frame_rate_hz,
        stride,
        selected_indices,
    }
}
